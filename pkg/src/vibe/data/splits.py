"""Evaluation protocols as explicit train/test plans over (subject, split) blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from ..errors import ConfigError
from .presets import DatasetPreset

PROTOCOLS = {"subject": "subject-specific", "cross": "cross-subject", "loso": "leave-one-subject-out"}
WITHIN, CROSS = "within-subject", "cross-subject"

Block = tuple[int, str]


@dataclass(frozen=True)
class Fold:
    """One trained model: the blocks it trains on and the labelled test blocks."""

    name: str
    subject: int
    train: tuple[Block, ...]
    tests: dict[str, tuple[Block, ...]]

    def test_blocks(self) -> set[Block]:
        return {b for blocks in self.tests.values() for b in blocks}


@dataclass(frozen=True)
class SplitPlan:
    protocol: str
    folds: tuple[Fold, ...]

    def train_units(self, fold: Fold, count: Callable[[int, str], int]) -> int:
        return sum(count(s, split) for s, split in fold.train)


def canonical_protocol(protocol: str) -> str:
    if protocol in PROTOCOLS:
        return protocol
    for short, long in PROTOCOLS.items():
        if protocol == long:
            return short
    raise ConfigError(f"unknown protocol {protocol!r}; expected one of {sorted(PROTOCOLS)}")


def make_splits(n_subjects: int, protocol: str) -> SplitPlan:
    """Fold structure for ``n_subjects`` under one protocol.

    subject: each subject trains and tests on its own data.
    cross:   each subject's model is tested on every other subject's test set.
    loso:    fold i trains on everyone but i; ``within-subject`` tests the
             training subjects' test sets and ``cross-subject`` the held-out one.
    """
    protocol = canonical_protocol(protocol)
    if n_subjects < 1:
        raise ConfigError("need at least one subject")
    if protocol != "subject" and n_subjects < 2:
        raise ConfigError(f"{PROTOCOLS[protocol]} needs at least 2 subjects, got {n_subjects}")
    everyone = range(n_subjects)
    folds = []
    for i in everyone:
        others = [j for j in everyone if j != i]
        if protocol == "subject":
            fold = Fold(f"sub-{i + 1:02d}", i, ((i, "train"),), {WITHIN: ((i, "test"),)})
        elif protocol == "cross":
            fold = Fold(f"sub-{i + 1:02d}", i, ((i, "train"),),
                        {WITHIN: ((i, "test"),), CROSS: tuple((j, "test") for j in others)})
        else:
            fold = Fold(f"loso-{i + 1:02d}", i, tuple((j, "train") for j in others),
                        {WITHIN: tuple((j, "test") for j in others), CROSS: ((i, "test"),)})
        if set(fold.train) & fold.test_blocks():
            raise AssertionError("train and test blocks overlap")
        folds.append(fold)
    return SplitPlan(protocol, tuple(folds))


def preset_unit_count(preset: DatasetPreset, unit: str = "average") -> Callable[[int, str], int]:
    """Per-block unit counts implied by a preset's published stimulus counts."""
    def count(subject: int, split: str) -> int:
        c = preset.train if split == "train" else preset.test
        if unit == "average":
            return c.n_images
        if unit == "trial":
            return c.n_trials
        raise ConfigError(f"unit must be 'average' or 'trial', got {unit!r}")
    return count
