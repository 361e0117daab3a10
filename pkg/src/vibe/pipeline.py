"""End-to-end operations behind the CLI subcommands.

Artifacts never embed filesystem paths or clocks, so identically seeded
runs in different directories produce identical bytes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .checkpoint import STAGE1, STAGE2, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data.container import read_container, write_container
from .data.dataset import Dataset, write_synthetic
from .data.regions import REGIONS, VISUAL_PATHWAY, ablation_channels, region_mask_for
from .data.splits import PROTOCOLS, make_splits
from .data.synth import SynthDataset, SynthSpec
from .errors import ConfigError, ReportError
from .metrics import (EvalReport, MetricTriple, boxplot_svg, embedding_stats, evaluate_batch,
                      scale_bridge_check, stats_table)
from .train import (gather, predict, proxy_latents, encode_means, reconstruct, train_stage1,
                    train_stage2, write_rows, STAGE1_LOG, STAGE2_LOG, STAGE2_EPOCH_LOG)

_NOT_IN_MANIFEST = ("data", "out", "stage", "svg")


def threads() -> int:
    try:
        return max(1, int(os.environ.get("VIBE_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"VIBE_THREADS must be an integer, got {os.environ['VIBE_THREADS']!r}") from None


def _config_manifest(cfg: RunConfig) -> dict:
    return {f"cfg.{k}": v for k, v in cfg.describe().items() if k not in _NOT_IN_MANIFEST}


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def open_dataset(cfg: RunConfig, channel_names: Optional[Sequence[str]] = None) -> Dataset:
    if not cfg.data:
        raise ConfigError("--data is required")
    ds = Dataset(cfg.data)
    if ds.preset.name != cfg.preset:
        raise ConfigError(f"dataset preset {ds.preset.name!r} does not match configured preset {cfg.preset!r}")
    if channel_names is not None:
        where = {n: i for i, n in enumerate(ds.canonical_names)}
        missing = [n for n in channel_names if n not in where]
        if missing:
            raise ConfigError(f"checkpoint channels absent from the dataset: {missing[:5]}")
        ds = ds.with_channels([where[n] for n in channel_names])
    return ds


def subjects_of(cfg: RunConfig, ds: Dataset) -> list[int]:
    if cfg.subjects is None:
        return ds.subjects
    wanted = [int(s) for s in cfg.subjects]
    absent = sorted(set(wanted) - set(ds.subjects))
    if absent:
        raise ReportError(f"subjects not in the dataset: {', '.join(f'sub-{s + 1:02d}' for s in absent)}")
    return wanted


# synth

def synth_command(cfg: RunConfig) -> dict:
    preset = SynthSpec(cfg.preset).preset.scaled(cfg.synth_train_concepts, cfg.synth_test_concepts,
                                                  cfg.synth_subjects)
    spec = SynthSpec(preset, n_subjects=preset.n_subjects, seed=cfg.seed, **_synth_overrides(cfg))
    return write_synthetic(cfg.out, SynthDataset(spec))


def _synth_overrides(cfg: RunConfig) -> dict:
    allowed = {"noise_std", "image_jitter", "visual_gain", "other_gain", "token_noise", "erp_amplitude",
               "subject_spread", "concept_factor_dim", "planted_region"}
    out = {}
    for key, value in cfg.extra.items():
        name = key[len("synth_"):] if key.startswith("synth_") else key
        if name not in allowed:
            continue
        try:
            if name == "planted_region":
                out[name] = value
            elif name == "concept_factor_dim":
                out[name] = int(value)
            else:
                out[name] = float(value)
        except ValueError:
            raise ConfigError(f"cannot parse {key}={value!r}") from None
    return out


# stage I / II

@dataclass
class TrainedPair:
    encoder: object
    mapper: object
    stage1_path: Optional[str] = None
    stage2_path: Optional[str] = None


def stage1_command(cfg: RunConfig, subjects: Optional[Sequence[int]] = None,
                   channels: Optional[Sequence[int]] = None, prefix: str = "stage1") -> str:
    ds = open_dataset(cfg)
    if channels is not None:
        ds = ds.with_channels(channels)
    subjects = list(subjects) if subjects is not None else subjects_of(cfg, ds)
    units = gather(ds, [(s, "train") for s in subjects], cfg.unit)
    result = train_stage1(cfg, units, dump_dir=cfg.out)
    extra = {"preset": cfg.preset, "channel_names": ",".join(ds.channel_names),
             "train_subjects": ",".join(str(s) for s in subjects), "n_train": result.n_train,
             "n_val": result.n_val, "validation": f"holdout-{cfg.val_fraction!r}",
             **_config_manifest(cfg)}
    path = _out(cfg, f"{prefix}.vibe")
    save_checkpoint(path, STAGE1, result.model, result.model.arch.to_dict(), result.optimizer,
                    {**extra, "snapshot": "final", "epoch": cfg.epochs})
    best_model = load_checkpoint(path).model
    best_model.load_state_dict(result.best_state)
    save_checkpoint(_out(cfg, f"{prefix}_best.vibe"), STAGE1, best_model, result.model.arch.to_dict(), None,
                    {**extra, "snapshot": "best-validation", "epoch": result.best_epoch})
    write_rows(_out(cfg, f"{prefix}_log.csv"), STAGE1_LOG, result.history)
    return path


def stage2_command(cfg: RunConfig, stage1_path: str, subjects: Optional[Sequence[int]] = None,
                   prefix: str = "stage2") -> str:
    ckpt = load_checkpoint(stage1_path, expect=STAGE1)
    if ckpt.manifest.get("preset", cfg.preset) != cfg.preset:
        raise ConfigError(f"stage-1 checkpoint was trained on preset {ckpt.manifest['preset']!r}")
    names = ckpt.manifest["channel_names"].split(",") if "channel_names" in ckpt.manifest else None
    ds = open_dataset(cfg, names)
    subjects = list(subjects) if subjects is not None else subjects_of(cfg, ds)
    units = gather(ds, [(s, "train") for s in subjects], cfg.unit, with_embeddings=True)
    latent = cfg.extra.get("latent_shape")
    latent = tuple(int(v) for v in latent.split(",")) if latent else None
    result = train_stage2(cfg, units, ckpt.model, latent_shape=latent, dump_dir=cfg.out)
    extra = {"preset": cfg.preset, "stage1_file_hash": file_hash(stage1_path),
             "encoder_hash": result.encoder_hash, "channel_names": ",".join(ds.channel_names),
             "train_subjects": ",".join(str(s) for s in subjects), "n_train": result.n_train,
             "n_val": result.n_val, "validation": f"holdout-{cfg.val_fraction!r}",
             **_config_manifest(cfg)}
    arch = result.mapper.cfg.to_dict()
    path = _out(cfg, f"{prefix}.vibe")
    save_checkpoint(path, STAGE2, result.mapper, arch, result.optimizer,
                    {**extra, "snapshot": "final", "epoch": cfg.epochs})
    best = load_checkpoint(path).model
    best.load_state_dict(result.best_state)
    save_checkpoint(_out(cfg, f"{prefix}_best.vibe"), STAGE2, best, arch, None,
                    {**extra, "snapshot": "best-validation", "epoch": result.best_epoch})
    write_rows(_out(cfg, f"{prefix}_steps.csv"), STAGE2_LOG, result.steps)
    write_rows(_out(cfg, f"{prefix}_log.csv"), STAGE2_EPOCH_LOG, result.history)
    return path


def load_pair(stage1_path: str, stage2_path: str) -> TrainedPair:
    s1 = load_checkpoint(stage1_path, expect=STAGE1)
    s2 = load_checkpoint(stage2_path, expect=STAGE2)
    if s2.manifest.get("encoder_hash") not in (None, s1.manifest.get("state_hash")):
        raise ConfigError("stage-2 checkpoint was trained against a different stage-1 encoder")
    return TrainedPair(s1.model, s2.model, stage1_path, stage2_path)


# inference and evaluation

def infer_command(cfg: RunConfig, stage1_path: str, stage2_path: str, split: str = "test",
                  embeddings_path: Optional[str] = None, name: str = "predictions.vibe") -> str:
    pair = load_pair(stage1_path, stage2_path)
    if embeddings_path:
        c = read_container(embeddings_path)
        tokens = c["tokens"]
        concept = c.tensors.get("concept", np.arange(len(tokens), dtype=np.float64))
        image = c.tensors.get("image", np.zeros(len(tokens)))
    else:
        ds = open_dataset(cfg)
        tokens = ds.embeddings(split)
        keys = np.stack([c for c in _embedding_keys(ds, split)], axis=1)
        concept, image = keys[:, 0].astype(np.float64), keys[:, 1].astype(np.float64)
    signals, proxy = predict(pair.encoder, pair.mapper, tokens, cfg.batch_size)
    manifest = {"split": split, "stage1_file_hash": file_hash(stage1_path),
                "stage2_file_hash": file_hash(stage2_path),
                "channel_names": load_checkpoint(stage1_path).manifest.get("channel_names", "")}
    path = _out(cfg, name)
    write_container(path, {"signals": signals, "proxy": proxy, "concept": np.asarray(concept, np.float64),
                           "image": np.asarray(image, np.float64)}, manifest)
    return path


def _embedding_keys(ds: Dataset, split: str):
    c = read_container(os.path.join(ds.root, "embeddings", f"{split}.vibe"))
    return c["concept"].astype(np.int64), c["image"].astype(np.int64)


def align_predictions(pred_signals: np.ndarray, pred_keys: np.ndarray, truth_keys: np.ndarray) -> np.ndarray:
    index = {(int(a), int(b)): n for n, (a, b) in enumerate(pred_keys)}
    try:
        return pred_signals[[index[(int(a), int(b))] for a, b in truth_keys]]
    except KeyError as exc:
        raise ReportError(f"no prediction for test image {exc.args[0]}") from None


def score_subjects(ds: Dataset, subjects: Sequence[int], pred_signals: np.ndarray, pred_keys: np.ndarray,
                   split: str = "test") -> list[MetricTriple]:
    """Metric triple of one prediction set against each subject's repetition-averaged truth."""
    def one(subject):
        truth, keys = ds.units(subject, split, "average")
        return evaluate_batch(align_predictions(pred_signals, pred_keys, keys), truth)

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        return list(pool.map(one, subjects))          # map keeps subject order


def eval_command(cfg: RunConfig, pred_path: str, stage: str = "stage2") -> EvalReport:
    c = read_container(pred_path)
    names = c.manifest.get("channel_names") or None
    ds = open_dataset(cfg, names.split(",") if names else None)
    subjects = subjects_of(cfg, ds)
    keys = np.stack([c["concept"], c["image"]], axis=1).astype(np.int64)
    split = c.manifest.get("split", "test")
    report = EvalReport(notes={"truth": "repetition-average"})
    label = PROTOCOLS.get(cfg.protocol, cfg.protocol)
    for s, triple in zip(subjects, score_subjects(ds, subjects, c["signals"], keys, split)):
        report.add(f"sub-{s + 1:02d}", label, stage, triple)
    _write_report(cfg, report, "report")
    return report


def _write_report(cfg: RunConfig, report: EvalReport, name: str) -> None:
    with open(_out(cfg, f"{name}.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    if cfg.svg and report.rows:
        groups = {}
        for r in report.rows:
            groups.setdefault(f"{r.protocol} {r.stage}", []).append(r.pearson)
        finite = {k: v for k, v in groups.items() if any(np.isfinite(v))}
        if finite:
            with open(_out(cfg, f"{name}.svg"), "w", encoding="utf-8") as fh:
                fh.write(boxplot_svg(finite, f"Pearson per subject ({name})"))


# protocols

def _train_pair(cfg: RunConfig, subjects: Sequence[int], prefix: str,
                channels: Optional[Sequence[int]] = None) -> TrainedPair:
    s1 = stage1_command(cfg, subjects, channels, prefix=f"{prefix}_stage1")
    s2 = stage2_command(cfg, s1, subjects, prefix=f"{prefix}_stage2")
    return load_pair(s1, s2)


def _predict_split(cfg: RunConfig, ds: Dataset, pair: TrainedPair, split: str = "test"):
    tokens = ds.embeddings(split)
    concept, image = _embedding_keys(ds, split)
    signals, _ = predict(pair.encoder, pair.mapper, tokens, cfg.batch_size)
    return signals, np.stack([concept, image], axis=1)


def _mean_triple(triples: Sequence[MetricTriple]) -> MetricTriple:
    return MetricTriple(float(np.mean([t.mse for t in triples])), float(np.mean([t.pearson for t in triples])),
                        float(np.mean([t.cosine for t in triples])), n=sum(t.n for t in triples),
                        missing=sum(t.missing for t in triples))


def protocol_command(cfg: RunConfig) -> EvalReport:
    """Train one pair per fold and report stage-II (and stage-I reconstruction) metrics per test label."""
    ds = open_dataset(cfg)
    subjects = subjects_of(cfg, ds)
    plan = make_splits(len(subjects), cfg.protocol)
    report = EvalReport(notes={"truth": "repetition-average", "protocol": PROTOCOLS[plan.protocol]})
    for fold in plan.folds:
        train_subjects = [subjects[s] for s, _ in fold.train]
        pair = _train_pair(cfg, train_subjects, fold.name)
        signals, keys = _predict_split(cfg, ds, pair)
        for label, blocks in fold.tests.items():
            test_subjects = [subjects[s] for s, _ in blocks]
            e2e = score_subjects(ds, test_subjects, signals, keys)
            rec = [evaluate_batch(reconstruct(pair.encoder, ds.units(s, "test")[0], cfg.batch_size),
                                  ds.units(s, "test")[0]) for s in test_subjects]
            protocol = plan.protocol if len(fold.tests) == 1 else f"{plan.protocol}-{label}"
            subject = f"sub-{subjects[fold.subject] + 1:02d}"
            report.add(subject, protocol, "stage2", _mean_triple(e2e))
            report.add(subject, protocol, "stage1", _mean_triple(rec))
    _write_report(cfg, report, f"protocol_{plan.protocol}")
    return report


ABLATION_HEADER = ("condition", "mode", "region", "channels", "latent_h", "mse", "pearson", "cosine")


def ablation_conditions() -> list[tuple[str, str]]:
    return [("remove", r) for r in REGIONS] + [("keep", VISUAL_PATHWAY)]


def ablate_command(cfg: RunConfig, include_full: bool = True) -> list[dict]:
    """Train and evaluate each channel condition (five region removals, visual-pathway keep)."""
    ds = open_dataset(cfg)
    subjects = subjects_of(cfg, ds)
    names = ds.canonical_names
    conditions = ([("all", "none")] if include_full else []) + ablation_conditions()
    if cfg.region:
        conditions = [c for c in conditions if c[1] == cfg.region]
        if not conditions:
            raise ConfigError(f"unknown ablation region {cfg.region!r}")
    rows, per_subject = [], {}
    for mode, region in conditions:
        if mode == "all":
            kept = list(range(len(names)))
        else:
            kept = ablation_channels(len(names), region_mask_for(names, region), mode)
        sub = ds.with_channels(kept)
        label = "full" if mode == "all" else f"{mode}-{region}"
        triples = []
        for s in subjects:
            pair = _train_pair(cfg, [s], f"ablate_{label}_sub-{s + 1:02d}", kept)
            signals, keys = _predict_split(cfg, sub, pair)
            triples.extend(score_subjects(sub, [s], signals, keys))
        per_subject[label] = [t.pearson for t in triples]
        mean = _mean_triple(triples)
        latent_h = cfg.vae_architecture(len(kept), ds.preset.samples).latent_shape[1]
        rows.append({"condition": label, "mode": mode, "region": region, "channels": len(kept),
                     "latent_h": latent_h, "mse": mean.mse, "pearson": mean.pearson, "cosine": mean.cosine})
    write_rows(_out(cfg, "ablation.csv"), ABLATION_HEADER, rows)
    if cfg.svg:
        with open(_out(cfg, "ablation.svg"), "w", encoding="utf-8") as fh:
            fh.write(boxplot_svg(per_subject, "Pearson per channel condition"))
    return rows


# embedding statistics

def pooled_values(specs: Sequence[str]) -> np.ndarray:
    """Concatenate the values named by ``path`` or ``path:tensor`` entries."""
    parts = []
    for spec in specs:
        path, _, tensor = spec.partition(":")
        c = read_container(path)
        names = [tensor] if tensor else list(c.tensors)
        for n in names:
            if n not in c.tensors:
                raise ReportError(f"{path} has no tensor {n!r}")
            if n in ("concept", "image", "repetition", "index"):
                continue
            parts.append(np.asarray(c[n], dtype=np.float64).ravel())
    if not parts:
        raise ReportError("no values to pool")
    return np.concatenate(parts)


def stats_command(cfg: RunConfig, families: dict[str, list[str]], stage1_path: Optional[str] = None,
                  stage2_path: Optional[str] = None) -> dict:
    """Pooled statistics per family plus the scale-bridge verdict when all three families exist.

    With a dataset and both checkpoints, the clip/latent/proxy families are
    computed directly from the combined train and test data.
    """
    values = {name: pooled_values(parts) for name, parts in families.items()}
    if stage1_path and stage2_path:
        pair = load_pair(stage1_path, stage2_path)
        names = load_checkpoint(stage1_path).manifest.get("channel_names")
        ds = open_dataset(cfg, names.split(",") if names else None)
        subjects = subjects_of(cfg, ds)
        clip, latent, proxy = [], [], []
        for split in ("train", "test"):
            tokens = ds.embeddings(split)
            clip.append(tokens.ravel())
            proxy.append(proxy_latents(pair.mapper, tokens, cfg.batch_size).ravel())
            for s in subjects:
                latent.append(encode_means(pair.encoder, ds.units(s, split)[0], cfg.batch_size).ravel())
        values.setdefault("clip", np.concatenate(clip).astype(np.float64))
        values.setdefault("latent", np.concatenate(latent).astype(np.float64))
        values.setdefault("proxy", np.concatenate(proxy).astype(np.float64))
    if not values:
        raise ConfigError("stats needs embedding files or both checkpoints")
    stats = {name: embedding_stats(v) for name, v in values.items()}
    text = stats_table(stats)
    result = {"stats": stats, "table": text, "bridge": None}
    if all(k in stats for k in ("clip", "proxy", "latent")):
        bridge = scale_bridge_check(stats["clip"], stats["proxy"], stats["latent"])
        result["bridge"] = bridge
        text += f"# scale bridge {bridge.message()}\n"
    with open(_out(cfg, "embedding_stats.csv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return result
