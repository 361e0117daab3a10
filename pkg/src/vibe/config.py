"""Run configuration with layered precedence: CLI flag > config file > preset default."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional

from .data.presets import get_preset
from .errors import ConfigError
from .losses import AlignmentLossConfig
from .qformer import QFormerConfig
from .vae import VaeArchitecture, VaeTrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Everything a training, inference or evaluation run reads.

    Architecture fields left at ``None`` fall back to the preset profile;
    ``batch`` likewise.
    """

    preset: str = "eeg"
    stage: str = ""
    data: str = ""
    out: str = "."
    seed: int = 0
    subjects: Optional[tuple] = None          # 0-based ids; None means every subject
    protocol: str = "subject"
    region: str = ""
    unit: str = "average"
    epochs: int = 100
    batch: Optional[int] = None
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    beta: float = 1e-4
    kl_warmup_epochs: int = 10
    warmup_epochs: int = 5
    clip: float = 1.0
    val_fraction: float = 0.05
    # Stage II
    lam: float = 1.0
    projections: int = 50
    projection_axis: str = "channel"
    target: str = "mean"
    # architecture overrides
    widths: Optional[tuple] = None
    stem_kernel: Optional[int] = None
    temporal_kernels: Optional[tuple] = None
    latent_channels: int = 4
    num_queries: Optional[int] = None
    hidden_dim: Optional[int] = None
    layers: Optional[int] = None
    heads: Optional[int] = None
    head_hidden: Optional[int] = None
    dtype: str = "float32"
    # synthetic data generation
    synth_subjects: Optional[int] = None
    synth_train_concepts: Optional[int] = None
    synth_test_concepts: Optional[int] = None
    svg: bool = True
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        get_preset(self.preset)
        if self.unit not in ("average", "trial"):
            raise ConfigError(f"unit must be 'average' or 'trial', got {self.unit!r}")
        if self.target not in ("mean", "sample"):
            raise ConfigError(f"target must be 'mean' or 'sample', got {self.target!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch is not None and self.batch < 1:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.lr < 0 or self.clip <= 0:
            raise ConfigError("lr must be non-negative and clip positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be non-negative")
        AlignmentLossConfig(self.lam, self.projections, self.seed, self.projection_axis)
        VaeTrainConfig(beta=self.beta, warmup_epochs=min(self.kl_warmup_epochs, self.epochs),
                       epochs=self.epochs)

    # preset-derived views

    @property
    def profile(self) -> dict:
        return PROFILES[self.preset]

    def _pick(self, name):
        value = getattr(self, name)
        return self.profile[name] if value is None else value

    @property
    def batch_size(self) -> int:
        return int(self._pick("batch"))

    def vae_architecture(self, channels: int, samples: int) -> VaeArchitecture:
        return VaeArchitecture(channels, samples, stem_kernel=int(self._pick("stem_kernel")),
                               widths=tuple(self._pick("widths")),
                               temporal_kernels=tuple(self._pick("temporal_kernels")),
                               latent_channels=self.latent_channels, dtype=self.dtype)

    def vae_train_config(self) -> VaeTrainConfig:
        return VaeTrainConfig(beta=self.beta, warmup_epochs=min(self.kl_warmup_epochs, self.epochs),
                              epochs=self.epochs, learning_rate=self.lr, weight_decay=self.weight_decay,
                              batch_size=self.batch_size)

    def qformer_config(self, embed_dim: int, latent_shape) -> QFormerConfig:
        return QFormerConfig(num_queries=int(self._pick("num_queries")), hidden_dim=int(self._pick("hidden_dim")),
                             layers=int(self._pick("layers")), heads=int(self._pick("heads")),
                             embed_dim=int(embed_dim), head_hidden=int(self._pick("head_hidden")),
                             output_latent_shape=tuple(latent_shape), dtype=self.dtype)

    def loss_config(self) -> AlignmentLossConfig:
        return AlignmentLossConfig(self.lam, self.projections, self.seed, self.projection_axis)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def describe(self) -> dict[str, str]:
        """Flat, fully resolved key=value view (for manifests and logs)."""
        out = {}
        for f in fields(self):
            if f.name == "extra":
                continue
            value = getattr(self, f.name)
            if value is None and f.name in self.profile:
                value = self.profile[f.name]
            if f.name == "subjects" and value is not None:
                value = tuple(v + 1 for v in value)
            out[f.name] = format_value(value)
        return out


# Published architecture sizes for eeg/meg; the toy preset gets a small network.
PROFILES = {
    "eeg": dict(batch=64, widths=(32, 64, 128), stem_kernel=25, temporal_kernels=(15, 11, 7),
                num_queries=64, hidden_dim=768, layers=6, heads=8, head_hidden=4096),
    "meg": dict(batch=16, widths=(32, 64, 128), stem_kernel=25, temporal_kernels=(15, 11, 7),
                num_queries=64, hidden_dim=768, layers=6, heads=8, head_hidden=4096),
    "toy": dict(batch=8, widths=(8, 16, 16), stem_kernel=5, temporal_kernels=(5, 3, 3),
                num_queries=8, hidden_dim=32, layers=2, heads=4, head_hidden=64),
}


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _strip_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _element_type(name: str):
    if name in ("widths", "temporal_kernels", "subjects"):
        return int
    return float


def parse_value(name: str, text: str):
    """Convert one textual value to the type of ``RunConfig.<name>``."""
    hints = typing.get_type_hints(RunConfig)
    if name not in hints or name == "extra":
        raise ConfigError(f"unknown configuration key {name!r}")
    tp, optional = _strip_optional(hints[name])
    text = text.strip()
    if optional and text in ("", "none", "all"):
        return None
    try:
        if tp is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is tuple:
            conv = _element_type(name)
            values = tuple(conv(v) for v in text.split(",") if v.strip())
            if name == "subjects":          # written 1-based like sub-01, stored 0-based
                if any(v < 1 for v in values):
                    raise ValueError(text)
                values = tuple(v - 1 for v in values)
            return values
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {name}={text!r} as {getattr(tp, '__name__', tp)}") from None


# keys stored verbatim in ``RunConfig.extra`` rather than as typed fields
EXTRA_KEYS = {"latent_shape", "synth_noise_std", "synth_image_jitter", "synth_visual_gain",
              "synth_other_gain", "synth_token_noise", "synth_erp_amplitude", "synth_subject_spread",
              "synth_concept_factor_dim", "synth_planted_region"}


def parse_assignment(key: str, value: str, out: dict) -> None:
    """Store one ``key=value`` into ``out`` (typed field, or ``extra`` for known extra keys)."""
    key = key.strip().replace("-", "_")
    if key == "lambda":
        key = "lam"
    if key in EXTRA_KEYS:
        out.setdefault("extra", {})[key] = value.strip()
    else:
        out[key] = parse_value(key, value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno} is not key=value: {raw!r}")
        parse_assignment(key, value, out)
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None


def resolve(file_values: Optional[Mapping] = None, cli_values: Optional[Mapping] = None) -> RunConfig:
    """Merge layers; ``None`` CLI values mean the flag was not given."""
    merged = dict(file_values or {})
    extra = dict(merged.pop("extra", {}))
    cli = {k: v for k, v in (cli_values or {}).items() if v is not None}
    extra.update(cli.pop("extra", {}))
    merged.update(cli)
    return RunConfig(**merged, extra=extra)
