"""Dataset presets: recording shape, subject count and stimulus counts."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import ConfigError
from .regions import channel_names


@dataclass(frozen=True)
class SplitCounts:
    concepts: int
    images: int
    repetitions: int

    @property
    def n_images(self) -> int:
        return self.concepts * self.images

    @property
    def n_trials(self) -> int:
        return self.n_images * self.repetitions


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    channels: int
    samples: int
    sample_rate: float
    train: SplitCounts
    test: SplitCounts
    n_subjects: int
    embedding_shape: tuple

    @property
    def signal_shape(self) -> tuple:
        return (self.channels, self.samples)

    def channel_names(self) -> list[str]:
        return channel_names(self.name)

    def scaled(self, train_concepts=None, test_concepts=None, n_subjects=None) -> "DatasetPreset":
        """Same preset with fewer concepts or subjects (for runs on a single machine)."""
        train, test = self.train, self.test
        if train_concepts is not None:
            train = replace(train, concepts=int(train_concepts))
        if test_concepts is not None:
            test = replace(test, concepts=int(test_concepts))
        out = replace(self, train=train, test=test,
                      n_subjects=self.n_subjects if n_subjects is None else int(n_subjects))
        for counts in (out.train, out.test):
            if min(counts.concepts, counts.images, counts.repetitions) < 1:
                raise ConfigError(f"preset counts must be positive, got {counts}")
        if out.n_subjects < 1:
            raise ConfigError("need at least one subject")
        return out


PRESETS = {
    "eeg": DatasetPreset("eeg", 63, 250, 250.0, SplitCounts(1654, 10, 4), SplitCounts(200, 1, 80),
                         10, (257, 768)),
    "meg": DatasetPreset("meg", 271, 200, 200.0, SplitCounts(1854, 12, 1), SplitCounts(200, 1, 12),
                         4, (257, 768)),
    "toy": DatasetPreset("toy", 12, 32, 100.0, SplitCounts(16, 4, 2), SplitCounts(8, 1, 4),
                         2, (17, 32)),
}


def get_preset(name: str) -> DatasetPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
