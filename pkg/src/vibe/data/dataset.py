"""Dataset directories: recordings per subject and split, plus image embeddings.

Layout::

    <root>/manifest.txt          key=value lines (preset, counts, channel names, ...)
    <root>/train/sub-XX.vibe     signals (n, C, T) float32; concept, image, repetition
    <root>/test/sub-XX.vibe
    <root>/embeddings/train.vibe tokens (n_images, N, D) float32; concept, image
    <root>/embeddings/test.vibe

Channel order on disk is whatever ``channel_names`` in the manifest says;
loading re-orders to the preset's canonical order so region masks stay valid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from ..errors import ConfigError, FormatError
from .container import format_manifest, parse_manifest, read_container, write_container
from .presets import DatasetPreset, SplitCounts, get_preset
from .regions import canonical_order
from .synth import SPLITS, SynthDataset

UNITS = ("average", "trial")
MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class Recording:
    subject_id: int
    concept_id: int
    image_id: int
    repetition: int
    signal: np.ndarray


def subject_file(root, split: str, subject: int) -> str:
    return os.path.join(os.fspath(root), split, f"sub-{subject + 1:02d}.vibe")


def embedding_file(root, split: str) -> str:
    return os.path.join(os.fspath(root), "embeddings", f"{split}.vibe")


def _counts_text(c: SplitCounts) -> str:
    return f"{c.concepts},{c.images},{c.repetitions}"


def _parse_ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise FormatError(f"manifest {what} is not a comma-separated integer list: {text!r}") from None


def dataset_manifest(preset: DatasetPreset, n_subjects: int, embedding_shape: Sequence[int],
                     channel_names: Sequence[str], source: str, seed=None,
                     extra: Optional[Mapping[str, object]] = None) -> dict:
    out = {
        "format": "vibe-dataset-1",
        "preset": preset.name,
        "channels": preset.channels,
        "samples": preset.samples,
        "sample_rate": preset.sample_rate,
        "subjects": n_subjects,
        "train_counts": _counts_text(preset.train),
        "test_counts": _counts_text(preset.test),
        "embedding_shape": ",".join(str(int(s)) for s in embedding_shape),
        "embedding_source": source,
        "channel_names": ",".join(channel_names),
    }
    if seed is not None:
        out["seed"] = seed
    out.update(extra or {})
    return out


def write_synthetic(root, synth: SynthDataset) -> dict:
    """Materialise a synthetic dataset under ``root``; returns the manifest."""
    spec = synth.spec
    manifest = dataset_manifest(synth.preset, spec.n_subjects, spec.embedding_shape,
                                synth.channel_names, "synthetic", spec.seed, spec.describe())
    for split in SPLITS:
        for subject in range(spec.n_subjects):
            write_container(subject_file(root, split, subject), synth.split_arrays(subject, split),
                            {"subject": subject, "split": split})
        write_container(embedding_file(root, split), synth.embedding_arrays(split), {"split": split})
    _write_manifest(root, manifest)
    return manifest


def write_arrays(root, preset: DatasetPreset, recordings: Mapping[tuple[int, str], Mapping[str, np.ndarray]],
                 embeddings: Mapping[str, Mapping[str, np.ndarray]], channel_names: Sequence[str],
                 source: str = "external") -> dict:
    """Write already-preprocessed arrays, keyed ``(subject, split)``, as a dataset directory."""
    subjects = sorted({s for s, _ in recordings})
    if subjects != list(range(len(subjects))):
        raise ConfigError(f"subjects must be numbered 0..n-1, got {subjects}")
    shapes = {tuple(np.shape(e["tokens"])[1:]) for e in embeddings.values()}
    if len(shapes) != 1:
        raise ConfigError(f"embedding splits disagree on token shape: {shapes}")
    for (subject, split), arrays in recordings.items():
        write_container(subject_file(root, split, subject), arrays, {"subject": subject, "split": split})
    for split, arrays in embeddings.items():
        write_container(embedding_file(root, split), arrays, {"split": split})
    manifest = dataset_manifest(preset, len(subjects), shapes.pop(), channel_names, source)
    _write_manifest(root, manifest)
    return manifest


def _write_manifest(root, manifest: Mapping[str, object]) -> None:
    path = os.path.join(os.fspath(root), MANIFEST)
    os.makedirs(os.fspath(root), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(format_manifest(manifest))
    os.replace(tmp, path)


def _average_repetitions(signals: np.ndarray, concept: np.ndarray, image: np.ndarray):
    """Mean over repetitions of each (concept, image), in first-seen order."""
    keys = np.stack([concept, image], axis=1).astype(np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    inverse = rank[inverse.reshape(-1)]
    sums = np.zeros((len(uniq),) + signals.shape[1:], dtype=np.float64)
    np.add.at(sums, inverse, signals.astype(np.float64))
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    mean = sums / counts.reshape((-1,) + (1,) * (signals.ndim - 1))
    return mean.astype(np.float32), uniq[order]


class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, root, channels: Optional[Sequence[int]] = None):
        self.root = os.fspath(root)
        path = os.path.join(self.root, MANIFEST)
        if not os.path.exists(path):
            raise ConfigError(f"no {MANIFEST} under {self.root!r}")
        with open(path, encoding="utf-8") as fh:
            self.manifest = parse_manifest(fh.read())
        m = self.manifest
        try:
            base = get_preset(m["preset"])
            train = SplitCounts(*_parse_ints(m["train_counts"], "train_counts"))
            test = SplitCounts(*_parse_ints(m["test_counts"], "test_counts"))
            self.n_subjects = int(m["subjects"])
            self.embedding_shape = _parse_ints(m["embedding_shape"], "embedding_shape")
            stored_names = m["channel_names"].split(",")
        except KeyError as exc:
            raise FormatError(f"dataset manifest lacks {exc.args[0]!r}") from None
        self.preset = DatasetPreset(base.name, base.channels, base.samples, base.sample_rate,
                                    train, test, self.n_subjects, self.embedding_shape)
        self.source = m.get("embedding_source", "synthetic")
        self._perm = canonical_order(stored_names, base.name)
        self.canonical_names = base.channel_names()
        self.channels = None if channels is None else [int(c) for c in channels]
        if self.channels is not None and any(not 0 <= c < base.channels for c in self.channels):
            raise ConfigError("channel selection out of range")

    @property
    def subjects(self) -> list[int]:
        return list(range(self.n_subjects))

    @property
    def channel_names(self) -> list[str]:
        if self.channels is None:
            return list(self.canonical_names)
        return [self.canonical_names[i] for i in self.channels]

    @property
    def signal_shape(self) -> tuple[int, int]:
        return (len(self.channel_names), self.preset.samples)

    def with_channels(self, channels: Sequence[int]) -> "Dataset":
        """Same dataset restricted to canonical channel indices ``channels``."""
        return Dataset(self.root, channels)

    def counts(self, split: str) -> SplitCounts:
        return self.preset.train if split == "train" else self.preset.test

    @lru_cache(maxsize=64)
    def _raw(self, subject: int, split: str) -> dict:
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        if not 0 <= subject < self.n_subjects:
            raise ConfigError(f"subject {subject} outside 0..{self.n_subjects - 1}")
        c = read_container(subject_file(self.root, split, subject))
        for name in ("signals", "concept", "image", "repetition"):
            if name not in c.tensors:
                raise FormatError(f"recording file lacks tensor {name!r}")
        signals = c["signals"]
        if signals.ndim != 3 or signals.shape[1:] != self.preset.signal_shape:
            raise FormatError(f"signals shaped {signals.shape}, expected (n, {self.preset.signal_shape})")
        if not np.all(np.isfinite(signals)):
            raise FormatError(f"non-finite values in subject {subject} {split} signals")
        signals = signals[:, self._perm, :]
        return {"signals": signals, "concept": c["concept"].astype(np.int64),
                "image": c["image"].astype(np.int64), "repetition": c["repetition"].astype(np.int64)}

    def units(self, subject: int, split: str, unit: str = "average") -> tuple[np.ndarray, np.ndarray]:
        """(signals (n, C, T), keys (n, 2) of concept/image) for one subject and split.

        ``average`` yields one repetition-averaged signal per image, ``trial``
        one row per stored repetition.
        """
        raw = self._raw(subject, split)
        if unit == "average":
            signals, keys = _average_repetitions(raw["signals"], raw["concept"], raw["image"])
        elif unit == "trial":
            signals, keys = raw["signals"], np.stack([raw["concept"], raw["image"]], axis=1)
        else:
            raise ConfigError(f"unit must be one of {UNITS}, got {unit!r}")
        if self.channels is not None:
            signals = signals[:, self.channels, :]
        return np.ascontiguousarray(signals), keys

    def recordings(self, subject: int, split: str):
        raw = self._raw(subject, split)
        for n in range(len(raw["signals"])):
            signal = raw["signals"][n]
            if self.channels is not None:
                signal = signal[self.channels]
            yield Recording(subject, int(raw["concept"][n]), int(raw["image"][n]),
                            int(raw["repetition"][n]), signal)

    @lru_cache(maxsize=4)
    def _embeddings(self, split: str) -> tuple[np.ndarray, dict]:
        c = read_container(embedding_file(self.root, split))
        tokens = c["tokens"]
        if tuple(tokens.shape[1:]) != tuple(self.embedding_shape):
            raise FormatError(f"embeddings shaped {tokens.shape}, manifest says {self.embedding_shape}")
        keys = np.stack([c["concept"], c["image"]], axis=1).astype(np.int64)
        return tokens, {(int(a), int(b)): n for n, (a, b) in enumerate(keys)}

    def embeddings(self, split: str, keys: Optional[np.ndarray] = None) -> np.ndarray:
        """Token embeddings for ``keys`` (concept, image) rows; every image when omitted."""
        tokens, index = self._embeddings(split)
        if keys is None:
            return tokens
        try:
            rows = [index[(int(a), int(b))] for a, b in keys]
        except KeyError as exc:
            raise FormatError(f"no embedding for image {exc.args[0]} in {split}") from None
        return tokens[rows]

    def pairs(self, subject: int, split: str, unit: str = "average"):
        """(embeddings, signals, keys) aligned row by row."""
        signals, keys = self.units(subject, split, unit)
        return self.embeddings(split, keys), signals, keys

    def unit_count(self, subject: int, split: str, unit: str = "average") -> int:
        return len(self.units(subject, split, unit)[1])


def load_dataset(root, channels: Optional[Sequence[int]] = None) -> Dataset:
    return Dataset(root, channels)
