"""Synthetic recordings and visual token embeddings with planted shared structure.

Every image is driven by a factor vector ``g`` (its concept's factor plus
image-level jitter).  Recordings mix smooth temporal templates through
per-subject sensor topographies weighted by ``g``, on top of a common
evoked response and white noise; embeddings are an affine function of the
same ``g`` plus token noise, rescaled to a calibrated element spread.

All randomness comes from generators keyed on (seed, purpose, indices), so
any single recording can be produced on demand and the whole dataset is a
pure function of its ``SynthSpec``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np

from ..errors import ConfigError
from .presets import DatasetPreset, get_preset
from .regions import VISUAL_PATHWAY, region_mask_for

CLIP_STD = 0.0247
SPLITS = ("train", "test")

# stream purposes
_GLOBAL, _SUBJECT, _CONCEPT, _IMAGE, _TOKENS, _NOISE = range(6)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the generator; see the module docstring for the model."""

    preset: DatasetPreset
    n_subjects: Optional[int] = None
    seed: int = 0
    concept_factor_dim: int = 16
    noise_std: float = 0.3
    embedding_shape: Optional[tuple] = None
    embedding_std: float = CLIP_STD
    image_jitter: float = 0.6
    subject_spread: float = 0.3
    erp_amplitude: float = 0.5
    visual_gain: float = 1.0
    other_gain: float = 0.35
    token_noise: float = 0.5
    position_amplitude: float = 0.5
    planted_region: str = VISUAL_PATHWAY
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if isinstance(self.preset, str):
            object.__setattr__(self, "preset", get_preset(self.preset))
        if self.n_subjects is None:
            object.__setattr__(self, "n_subjects", self.preset.n_subjects)
        if self.embedding_shape is None:
            object.__setattr__(self, "embedding_shape", tuple(self.preset.embedding_shape))
        object.__setattr__(self, "embedding_shape", tuple(int(s) for s in self.embedding_shape))
        if self.n_subjects < 1:
            raise ConfigError("need at least one subject")
        if self.concept_factor_dim < 1:
            raise ConfigError("concept_factor_dim must be positive")
        if not 0.0 <= self.image_jitter <= 1.0:
            raise ConfigError("image_jitter must lie in [0, 1]")
        if min(self.noise_std, self.token_noise, self.embedding_std) < 0:
            raise ConfigError("noise levels and embedding_std must be non-negative")
        region_mask_for([], self.planted_region)       # validates the region name
        if len(self.embedding_shape) != 2 or min(self.embedding_shape) < 1:
            raise ConfigError(f"embedding_shape must be (N, D), got {self.embedding_shape}")

    def describe(self) -> dict:
        """Flat key=value description for manifests."""
        return {
            "synth_seed": self.seed,
            "synth_factor_dim": self.concept_factor_dim,
            "synth_noise_std": self.noise_std,
            "synth_image_jitter": self.image_jitter,
            "synth_subject_spread": self.subject_spread,
            "synth_erp_amplitude": self.erp_amplitude,
            "synth_visual_gain": self.visual_gain,
            "synth_other_gain": self.other_gain,
            "synth_token_noise": self.token_noise,
            "synth_position_amplitude": self.position_amplitude,
            "synth_planted_region": self.planted_region,
            "embedding_std_target": self.embedding_std,
        }


def _split_index(split: str) -> int:
    try:
        return SPLITS.index(split)
    except ValueError:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}") from None


def _templates(rng: np.random.Generator, k: int, samples: int) -> np.ndarray:
    """(k, T) smooth oscillatory bursts, each with unit RMS."""
    t = np.arange(samples, dtype=np.float64)
    centre = rng.uniform(0.15, 0.75, k) * samples
    width = rng.uniform(0.05, 0.15, k) * samples
    freq = rng.uniform(0.5, 3.0, k)
    phase = rng.uniform(0, 2 * np.pi, k)
    out = np.exp(-0.5 * ((t[None] - centre[:, None]) / width[:, None]) ** 2)
    out = out * np.cos(2 * np.pi * freq[:, None] * (t[None] - centre[:, None]) / samples + phase[:, None])
    rms = np.sqrt((out ** 2).mean(axis=1, keepdims=True))
    return out / np.maximum(rms, 1e-12)


def _smooth_columns(a: np.ndarray) -> np.ndarray:
    """Light smoothing along the sensor axis so neighbouring channels co-vary."""
    padded = np.pad(a, ((1, 1), (0, 0)), mode="edge")
    return 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]


class SynthDataset:
    """Lazily evaluated synthetic dataset for one :class:`SynthSpec`."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.preset = spec.preset
        self.channel_names = self.preset.channel_names()

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.seed, *key])

    # shared structure

    @cached_property
    def _global(self) -> dict:
        spec, p = self.spec, self.preset
        k = spec.concept_factor_dim
        n_tok, dim = spec.embedding_shape
        rng = self._rng(_GLOBAL)
        templates = _templates(rng, k + 1, p.samples)
        gain = np.full(p.channels, spec.other_gain)
        gain[region_mask_for(self.channel_names, spec.planted_region)] = spec.visual_gain
        topo = _smooth_columns(rng.standard_normal((p.channels, k + 1)))
        positions = rng.standard_normal((n_tok, dim)) * spec.position_amplitude
        weights = rng.standard_normal((k, dim)) / math.sqrt(k)
        mix = rng.uniform(0.5, 1.0, n_tok)
        mix[0] = 1.5
        return dict(templates=templates, gain=gain, topo=topo, positions=positions,
                    weights=weights, mix=mix)

    @cached_property
    def embedding_scale(self) -> float:
        """Factor that puts the pooled element std of all emitted tokens at the target.

        The pooled moments are exact in the image factors (which are cheap to
        enumerate) and only the token-noise term is taken in expectation.
        """
        g = self._global
        pos, mix = g["positions"], g["mix"]
        factors = np.concatenate([
            np.stack([self.factor(split, int(c), int(i)) for c, i in self.image_keys(split)])
            for split in SPLITS])
        base = factors @ g["weights"]                       # (images, D)
        base_mean = base.mean(axis=0)
        mean = pos.mean() + mix.mean() * base_mean.mean()
        second = (pos ** 2).mean()
        second += 2.0 * (pos * mix[:, None] * base_mean[None, :]).mean()
        second += (mix ** 2).mean() * (base ** 2).mean()
        second += self.spec.token_noise ** 2
        var = second - mean ** 2
        return self.spec.embedding_std / math.sqrt(var) if var > 0 else 0.0

    @lru_cache(maxsize=None)
    def _subject(self, subject: int) -> tuple[np.ndarray, np.ndarray]:
        """(evoked response (C, T), stimulus topographies (C, k)) for one subject."""
        if not 0 <= subject < self.spec.n_subjects:
            raise ConfigError(f"subject {subject} outside 0..{self.spec.n_subjects - 1}")
        g = self._global
        rng = self._rng(_SUBJECT, subject)
        topo = g["topo"] + self.spec.subject_spread * rng.standard_normal(g["topo"].shape)
        topo = topo * g["gain"][:, None]
        topo = topo / np.sqrt((topo ** 2).mean(axis=0, keepdims=True))
        erp = self.spec.erp_amplitude * np.outer(topo[:, 0], g["templates"][0])
        return erp, topo[:, 1:]

    def _counts(self, split: str):
        return self.preset.train if _split_index(split) == 0 else self.preset.test

    def _check(self, split: str, concept: int, image: int, rep: Optional[int] = None) -> None:
        c = self._counts(split)
        if not (0 <= concept < c.concepts and 0 <= image < c.images):
            raise ConfigError(f"({concept}, {image}) outside the {split} split {c}")
        if rep is not None and not 0 <= rep < c.repetitions:
            raise ConfigError(f"repetition {rep} outside 0..{c.repetitions - 1}")

    def factor(self, split: str, concept: int, image: int) -> np.ndarray:
        """Driving factor of one image: concept factor plus image jitter, unit variance."""
        self._check(split, concept, image)
        s = _split_index(split)
        k = self.spec.concept_factor_dim
        f = self._rng(_CONCEPT, s, concept).standard_normal(k)
        eps = self._rng(_IMAGE, s, concept, image).standard_normal(k)
        j = self.spec.image_jitter
        return math.sqrt(1.0 - j * j) * f + j * eps

    def clean_signal(self, subject: int, split: str, concept: int, image: int) -> np.ndarray:
        erp, topo = self._subject(subject)
        g = self.factor(split, concept, image)
        k = self.spec.concept_factor_dim
        stim = (topo * g[None, :]) @ self._global["templates"][1:] / math.sqrt(k)
        return erp + stim

    def signal(self, subject: int, split: str, concept: int, image: int, rep: int) -> np.ndarray:
        """One (C, T) float32 recording."""
        self._check(split, concept, image, rep)
        clean = self.clean_signal(subject, split, concept, image)
        noise = self._rng(_NOISE, subject, _split_index(split), concept, image, rep).standard_normal(clean.shape)
        return (clean + self.spec.noise_std * noise).astype(np.float32)

    def embedding(self, split: str, concept: int, image: int) -> np.ndarray:
        """(N, D) float32 token embedding of one image (subject independent)."""
        g = self._global
        f = self.factor(split, concept, image)
        noise = self._rng(_TOKENS, _split_index(split), concept, image).standard_normal(g["positions"].shape)
        tokens = g["positions"] + g["mix"][:, None] * (f @ g["weights"])[None, :]
        tokens = tokens + self.spec.token_noise * noise
        return (tokens * self.embedding_scale).astype(np.float32)

    def image_keys(self, split: str) -> np.ndarray:
        c = self._counts(split)
        return np.array([(ci, ii) for ci in range(c.concepts) for ii in range(c.images)], dtype=np.int64)

    def trial_keys(self, split: str) -> np.ndarray:
        c = self._counts(split)
        return np.array([(ci, ii, r) for ci in range(c.concepts) for ii in range(c.images)
                         for r in range(c.repetitions)], dtype=np.int64)

    def split_arrays(self, subject: int, split: str) -> dict[str, np.ndarray]:
        """Every trial of one subject and split, as container-ready arrays."""
        keys = self.trial_keys(split)
        signals = np.empty((len(keys),) + self.preset.signal_shape, dtype=np.float32)
        for n, (c, i, r) in enumerate(keys):
            signals[n] = self.signal(subject, split, int(c), int(i), int(r))
        return {"signals": signals, "concept": keys[:, 0].astype(np.float64),
                "image": keys[:, 1].astype(np.float64), "repetition": keys[:, 2].astype(np.float64)}

    def embedding_arrays(self, split: str) -> dict[str, np.ndarray]:
        keys = self.image_keys(split)
        tokens = np.empty((len(keys),) + self.spec.embedding_shape, dtype=np.float32)
        for n, (c, i) in enumerate(keys):
            tokens[n] = self.embedding(split, int(c), int(i))
        return {"tokens": tokens, "concept": keys[:, 0].astype(np.float64),
                "image": keys[:, 1].astype(np.float64)}


def synth_dataset(spec: SynthSpec) -> SynthDataset:
    return SynthDataset(spec)
