"""Sensor channel names, canonical orderings and brain-region masks."""

from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from ..errors import ConfigError

REGIONS = ("frontal", "central", "temporal", "parietal", "occipital")
VISUAL_PATHWAY = "visual-pathway"

EEG_REGIONS = {
    "frontal": ["Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1", "F2",
                "F4", "F6", "F8", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6"],
    "central": ["C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP5", "CP3", "CP1", "CPz", "CP2",
                "CP4", "CP6"],
    "temporal": ["FT9", "FT7", "FT8", "FT10", "T7", "T8", "TP9", "TP7", "TP8", "TP10"],
    "parietal": ["P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3", "POz",
                 "PO4", "PO8"],
    "occipital": ["O1", "Oz", "O2"],
}

# left / right / midline sensor counts per CTF region letter
MEG_COUNTS = {
    "frontal": ("F", 32, 32, 3),
    "central": ("C", 24, 24, 4),
    "parietal": ("P", 22, 22, 1),
    "occipital": ("O", 19, 17, 3),
    "temporal": ("T", 34, 34, 0),
}
_MEG_LETTER = {letter: region for region, (letter, *_) in MEG_COUNTS.items()}
_MEG_NAME = re.compile(r"^M([LRZ])([FCPOT])\d+")

# a 12-sensor montage drawn from the EEG names, for fast toy runs
TOY_CHANNELS = ["Fp1", "F3", "C3", "Cz", "T7", "T8", "P3", "Pz", "PO7", "O1", "Oz", "O2"]


def _meg_names() -> list[str]:
    names = []
    for region, (letter, left, right, mid) in MEG_COUNTS.items():
        for side, count in (("L", left), ("R", right), ("Z", mid)):
            names.extend(f"M{side}{letter}{i:02d}" for i in range(1, count + 1))
    return names


EEG_CHANNELS = [name for region in REGIONS for name in EEG_REGIONS[region]]
MEG_CHANNELS = _meg_names()
_EEG_REGION_OF = {name: region for region, names in EEG_REGIONS.items() for name in names}


def channel_names(preset: str) -> list[str]:
    """Canonical channel order of a preset."""
    if preset == "eeg":
        return list(EEG_CHANNELS)
    if preset == "meg":
        return list(MEG_CHANNELS)
    if preset == "toy":
        return list(TOY_CHANNELS)
    raise ConfigError(f"unknown preset {preset!r}")


def region_of(name: str) -> str:
    """Brain region of one channel name (10-10 EEG or CTF MEG naming)."""
    if name in _EEG_REGION_OF:
        return _EEG_REGION_OF[name]
    m = _MEG_NAME.match(name)
    if m:
        return _MEG_LETTER[m.group(2)]
    raise ConfigError(f"channel {name!r} does not belong to a known region")


def region_mask_for(names: Sequence[str], region: str) -> list[int]:
    """Indices into ``names`` of the channels in ``region`` (in ``names`` order)."""
    if region == VISUAL_PATHWAY:
        wanted = {"temporal", "occipital"}
    elif region in REGIONS:
        wanted = {region}
    else:
        raise ConfigError(f"unknown region {region!r}; expected one of {REGIONS + (VISUAL_PATHWAY,)}")
    return [i for i, name in enumerate(names) if region_of(name) in wanted]


def region_mask(preset: str, region: str) -> list[int]:
    return region_mask_for(channel_names(preset), region)


def region_config(preset: str) -> dict[str, list[int]]:
    """Every region (and the visual pathway) mapped to its index list."""
    return {r: region_mask(preset, r) for r in REGIONS + (VISUAL_PATHWAY,)}


def canonical_order(names: Sequence[str], preset: str) -> np.ndarray:
    """Permutation taking data in ``names`` order to the preset's canonical order.

    ``data[..., perm, :]`` is canonical.  The name sets must match exactly.
    """
    canon = channel_names(preset)
    if sorted(names) != sorted(canon) or len(set(names)) != len(names):
        missing = sorted(set(canon) - set(names))[:5]
        extra = sorted(set(names) - set(canon))[:5]
        raise ConfigError(f"channel names do not match preset {preset!r}: missing {missing}, extra {extra}")
    where = {name: i for i, name in enumerate(names)}
    return np.array([where[name] for name in canon], dtype=np.int64)


def ablation_channels(n_channels: int, mask: Sequence[int], mode: str) -> list[int]:
    """Channel indices that survive removing (or keeping only) ``mask``."""
    mask = sorted(set(int(i) for i in mask))
    if any(i < 0 or i >= n_channels for i in mask):
        raise ConfigError(f"mask indices out of range for {n_channels} channels")
    if mode == "remove":
        kept = [i for i in range(n_channels) if i not in set(mask)]
    elif mode == "keep":
        kept = mask
    else:
        raise ConfigError(f"ablation mode must be 'remove' or 'keep', got {mode!r}")
    if not kept:
        raise ConfigError("ablation leaves no channels")
    return kept


def apply_ablation(signals: np.ndarray, mask: Sequence[int], mode: str,
                   axis: int = -2) -> tuple[np.ndarray, list[int]]:
    """Drop (``remove``) or retain only (``keep``) the masked channels along ``axis``."""
    kept = ablation_channels(signals.shape[axis], mask, mode)
    return np.take(signals, kept, axis=axis), kept
