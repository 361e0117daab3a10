"""Training loops for both stages, the learning-rate schedule and inference.

Every random choice (initialisation, shuffling, reparameterisation noise,
validation holdout, SWD projections) comes from its own stream derived from
the run seed, so a run is a pure function of (seed, config, data).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nd
from .config import RunConfig
from .data.container import write_container
from .data.dataset import Dataset
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .checkpoint import state_hash
from .losses import ProjectionStream, alignment_terms
from .qformer import Mapper, assert_frozen
from .vae import TSCVAE, elbo_terms, kl_warmup, reparameterize

# stream purposes
_INIT, _SHUFFLE, _NOISE, _HOLDOUT, _PROJ = range(5)
STAGE1_LOG = ("epoch", "lr", "beta", "loss", "rec", "kl", "val_rec")
STAGE2_LOG = ("epoch", "step", "lr", "lam", "total", "mse", "swd", "grad_norm")
STAGE2_EPOCH_LOG = ("epoch", "lr", "total", "mse", "swd", "val_total")


def stream(seed: int, purpose: int, *more: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1000 + purpose, *more])


def cosine_lr(epoch: int, epochs: int, base_lr: float, warmup: int = 0) -> float:
    """Learning rate for a 1-based epoch.

    ``warmup`` epochs ramp linearly up to ``base_lr`` (reached at epoch
    ``warmup``); the remaining epochs follow a half cosine from ``base_lr``
    at the first post-warmup epoch down to 0 at the last epoch.
    """
    if not 1 <= epoch <= epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{epochs}")
    if not 0 <= warmup < epochs:
        raise ConfigError(f"warmup must be smaller than the epoch budget, got {warmup} of {epochs}")
    if epoch <= warmup:
        return base_lr * epoch / warmup
    span = epochs - warmup - 1
    if span == 0:
        return base_lr
    progress = (epoch - warmup - 1) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def holdout(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split ``range(n)`` into sorted (train, validation) index arrays."""
    n_val = int(math.floor(n * fraction))
    if n_val >= n:
        n_val = n - 1
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def batches(n: int, size: int, rng: Optional[np.random.Generator]):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, size):
        yield start // size, order[start:start + size]


@dataclass
class UnitSet:
    """Training or evaluation units gathered from several (subject, split) blocks."""

    signals: np.ndarray                 # (n, C, T)
    keys: np.ndarray                    # (n, 3): subject, concept, image
    embeddings: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.signals)


def gather(dataset: Dataset, blocks: Sequence[tuple[int, str]], unit: str = "average",
           with_embeddings: bool = False) -> UnitSet:
    sigs, keys, embs = [], [], []
    for subject, split in blocks:
        s, k = dataset.units(subject, split, unit)
        sigs.append(s)
        keys.append(np.column_stack([np.full(len(k), subject), k]))
        if with_embeddings:
            embs.append(dataset.embeddings(split, k))
    if not sigs:
        raise ConfigError("no data blocks selected")
    return UnitSet(np.concatenate(sigs), np.concatenate(keys).astype(np.int64),
                   np.concatenate(embs) if with_embeddings else None)


def write_rows(path, header: Sequence[str], rows: Sequence[dict]) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(row.get(h, "")) for h in header))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _require_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}")


def _abort(what: str, epoch: int, batch: int, idx, x, dump_dir) -> None:
    """Re-raise a numeric failure with its location, dumping the batch when a directory is given."""
    where = f"epoch {epoch}, batch {batch}"
    if dump_dir:
        path = os.path.join(dump_dir, "nonfinite_batch.vibe")
        write_container(path, {"signals": np.asarray(x, dtype=np.float32), "index": idx.astype(np.float64)},
                        {"epoch": epoch, "batch": batch, "what": what})
        where += f" (batch dumped to {path})"
    raise NumericError(f"{what} at {where}; unit indices {idx.tolist()[:16]}")


@dataclass
class Stage1Result:
    model: TSCVAE
    optimizer: nd.AdamW
    history: list
    best_state: dict
    best_epoch: int
    n_train: int
    n_val: int


def train_stage1(cfg: RunConfig, units: UnitSet, dump_dir: Optional[str] = None,
                 model: Optional[TSCVAE] = None) -> Stage1Result:
    """Per epoch: KL weight and learning rate; per batch: encode, sample, decode, ELBO, AdamW step."""
    n, C, T = units.signals.shape
    arch = cfg.vae_architecture(C, T)
    tcfg = cfg.vae_train_config()
    model = model or TSCVAE(arch, stream(cfg.seed, _INIT, 1))
    opt = nd.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                   weight_decay=cfg.weight_decay)
    train_idx, val_idx = holdout(n, cfg.val_fraction, stream(cfg.seed, _HOLDOUT, 1))
    shuffle = stream(cfg.seed, _SHUFFLE, 1)
    noise = stream(cfg.seed, _NOISE, 1)
    x_all = units.signals[:, None].astype(arch.dtype, copy=False)
    history, best, best_epoch, best_val = [], None, 0, math.inf
    for epoch in range(1, cfg.epochs + 1):
        beta_cur = kl_warmup(epoch, tcfg)
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, 0)
        sums = np.zeros(3)
        for b, sel in batches(len(train_idx), cfg.batch_size, shuffle):
            idx = train_idx[sel]
            x = x_all[idx]
            opt.zero_grad()
            try:
                lat = model.encode(x)
                x_hat = model.decode(reparameterize(lat, noise))
                loss, rec, kl = elbo_terms(x_hat, nd.Tensor(x), lat, beta_cur)
                _require_finite(loss.item(), "stage-1 loss")
                loss.backward()
            except NumericError as err:
                _abort(str(err), epoch, b, idx, x, dump_dir)
            opt.step()
            sums += np.array([loss.item(), rec.item(), kl.item()]) * len(idx)
        sums /= len(train_idx)
        row = {"epoch": epoch, "lr": opt.lr, "beta": beta_cur, "loss": float(sums[0]),
               "rec": float(sums[1]), "kl": float(sums[2]), "val_rec": ""}
        if len(val_idx):
            val = reconstruction_mse(model, x_all[val_idx], cfg.batch_size)
            row["val_rec"] = val
            if val < best_val:
                best_val, best_epoch = val, epoch
                best = {k: v.copy() for k, v in model.state_dict().items()}
        history.append(row)
    if best is None:
        best, best_epoch = {k: v.copy() for k, v in model.state_dict().items()}, cfg.epochs
    return Stage1Result(model, opt, history, best, best_epoch, len(train_idx), len(val_idx))


def reconstruction_mse(model: TSCVAE, x: np.ndarray, batch: int) -> float:
    total, count = 0.0, 0
    with nd.no_grad():
        for _, sel in batches(len(x), batch, None):
            xb = x[sel]
            x_hat = model.decode(model.encode(xb).mu).data
            total += float(np.sum((x_hat.astype(np.float64) - xb) ** 2))
            count += xb.size
    return total / count


def reconstruct(model: TSCVAE, signals: np.ndarray, batch: int = 64) -> np.ndarray:
    """Deterministic reconstruction through the posterior mean: (n, C, T) -> (n, C, T)."""
    out = np.empty(signals.shape, dtype=np.float32)
    with nd.no_grad():
        for _, sel in batches(len(signals), batch, None):
            xb = signals[sel][:, None].astype(model.arch.dtype, copy=False)
            out[sel] = model.decode(model.encode(xb).mu).data[:, 0]
    return out


def encode_means(model: TSCVAE, signals: np.ndarray, batch: int = 64,
                 with_log_var: bool = False):
    mus, lvs = [], []
    with nd.no_grad():
        for _, sel in batches(len(signals), batch, None):
            lat = model.encode(signals[sel][:, None].astype(model.arch.dtype, copy=False))
            mus.append(lat.mu.data)
            lvs.append(lat.log_var.data)
    mu = np.concatenate(mus)
    return (mu, np.concatenate(lvs)) if with_log_var else mu


@dataclass
class Stage2Result:
    mapper: Mapper
    optimizer: nd.AdamW
    steps: list
    history: list
    best_state: dict
    best_epoch: int
    encoder_hash: str
    n_train: int
    n_val: int
    extra: dict = field(default_factory=dict)


def check_stage1_compatible(encoder: TSCVAE, signal_shape: tuple, latent_shape: Optional[tuple] = None) -> None:
    arch = encoder.arch
    if (arch.channels, arch.samples) != tuple(signal_shape):
        raise ConfigError(f"stage-1 checkpoint expects signals {(arch.channels, arch.samples)}, "
                          f"data has {tuple(signal_shape)}")
    if latent_shape is not None and tuple(latent_shape) != tuple(encoder.latent_shape):
        raise ConfigError(f"configured latent shape {tuple(latent_shape)} != checkpoint latent "
                          f"{tuple(encoder.latent_shape)}")


def train_stage2(cfg: RunConfig, units: UnitSet, encoder: TSCVAE,
                 latent_shape: Optional[tuple] = None, dump_dir: Optional[str] = None) -> Stage2Result:
    """Align proxy latents ``P(g(e_V))`` to frozen-encoder latents with ``mse + lam * swd``."""
    if units.embeddings is None:
        raise ConfigError("stage II needs embeddings paired with the recordings")
    check_stage1_compatible(encoder, units.signals.shape[1:], latent_shape)
    encoder.freeze()
    assert_frozen(encoder)
    before = state_hash(encoder)
    qcfg = cfg.qformer_config(units.embeddings.shape[-1], encoder.latent_shape)
    mapper = Mapper(qcfg, stream(cfg.seed, _INIT, 2))
    params = mapper.parameters()
    opt = nd.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()
    projections = ProjectionStream(int(stream(cfg.seed, _PROJ, 2).integers(2 ** 63)))
    noise = stream(cfg.seed, _NOISE, 2)

    mu, log_var = encode_means(encoder, units.signals, cfg.batch_size, with_log_var=True)
    e_all = units.embeddings.astype(qcfg.dtype, copy=False)
    train_idx, val_idx = holdout(len(units), cfg.val_fraction, stream(cfg.seed, _HOLDOUT, 2))
    shuffle = stream(cfg.seed, _SHUFFLE, 2)
    warmup = min(cfg.warmup_epochs, cfg.epochs - 1)

    def targets(idx):
        if cfg.target == "mean":
            return nd.Tensor(mu[idx])
        eps = noise.standard_normal(mu[idx].shape, dtype=mu.dtype.type)
        return nd.Tensor(mu[idx] + np.exp(0.5 * log_var[idx]) * eps)

    steps, history = [], []
    best, best_epoch, best_val = None, 0, math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, warmup)
        sums = np.zeros(3)
        for b, sel in batches(len(train_idx), cfg.batch_size, shuffle):
            idx = train_idx[sel]
            opt.zero_grad()
            try:
                z_hat = mapper(e_all[idx])
                total, mse, sw = alignment_terms(z_hat, targets(idx), loss_cfg, stream=projections)
                _require_finite(total.item(), "stage-2 loss")
                total.backward()
            except NumericError as err:
                _abort(str(err), epoch, b, idx, units.signals[idx], dump_dir)
            norm = nd.clip_global_norm(params, cfg.clip)
            opt.step()
            step += 1
            steps.append({"epoch": epoch, "step": step, "lr": opt.lr, "lam": loss_cfg.lam,
                          "total": total.item(), "mse": mse.item(), "swd": sw.item(), "grad_norm": norm})
            sums += np.array([total.item(), mse.item(), sw.item()]) * len(idx)
        sums /= len(train_idx)
        row = {"epoch": epoch, "lr": opt.lr, "total": float(sums[0]), "mse": float(sums[1]),
               "swd": float(sums[2]), "val_total": ""}
        if len(val_idx):
            with nd.no_grad():
                z_hat = proxy_latents(mapper, e_all[val_idx], cfg.batch_size)
                val = alignment_terms(nd.Tensor(z_hat), nd.Tensor(mu[val_idx]), loss_cfg)[0].item()
            row["val_total"] = val
            if val < best_val:
                best_val, best_epoch = val, epoch
                best = {k: v.copy() for k, v in mapper.state_dict().items()}
        history.append(row)
    assert_frozen(encoder)
    if state_hash(encoder) != before:
        raise ContractError("encoder parameters changed during stage II")
    if best is None:
        best, best_epoch = {k: v.copy() for k, v in mapper.state_dict().items()}, cfg.epochs
    return Stage2Result(mapper, opt, steps, history, best, best_epoch, before, len(train_idx), len(val_idx))


def proxy_latents(mapper: Mapper, embeddings: np.ndarray, batch: int = 64) -> np.ndarray:
    expected = mapper.cfg.embed_dim
    if embeddings.ndim != 3 or embeddings.shape[-1] != expected:
        raise ContractError(f"embeddings must be (n, N, {expected}), got {embeddings.shape}")
    outs = []
    with nd.no_grad():
        for _, sel in batches(len(embeddings), batch, None):
            outs.append(mapper(embeddings[sel].astype(mapper.cfg.dtype, copy=False)).data)
    return np.concatenate(outs)


def predict(encoder: TSCVAE, mapper: Mapper, embeddings: np.ndarray, batch: int = 64):
    """Signals decoded from proxy latents: returns ``(signals (n, C, T), proxy (n, d, H, W))``."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim == 2:
        embeddings = embeddings[None]
    if tuple(mapper.cfg.output_latent_shape) != tuple(encoder.latent_shape):
        raise ContractError(f"stage-2 latent {mapper.cfg.output_latent_shape} does not fit the "
                            f"stage-1 decoder {encoder.latent_shape}")
    z_hat = proxy_latents(mapper, embeddings, batch)
    out = np.empty((len(z_hat), encoder.arch.channels, encoder.arch.samples), dtype=np.float32)
    with nd.no_grad():
        for _, sel in batches(len(z_hat), batch, None):
            out[sel] = encoder.decode(z_hat[sel].astype(encoder.arch.dtype, copy=False)).data[:, 0]
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite predicted signals")
    return out, z_hat.astype(np.float32)


def identity_residual(steps: Sequence[dict]) -> float:
    """Largest ``|total - (mse + lam * swd)|`` over logged steps."""
    if not steps:
        return 0.0
    return max(abs(s["total"] - (s["mse"] + s["lam"] * s["swd"])) for s in steps)


def check_signal_shape(signals: np.ndarray, expected: tuple) -> None:
    if tuple(signals.shape[1:]) != tuple(expected):
        raise DimensionError(f"signals {signals.shape[1:]} do not match {expected}")
