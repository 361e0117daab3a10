"""Spatio-temporal convolutional VAE for multichannel neural recordings.

Recordings enter as (B, 1, C, T): one feature map whose rows are sensor
channels and whose columns are time samples.  Temporal kernels are (1, k)
and spatial kernels are (k, 1), so the two axes are mixed separately.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import nd
from .errors import ConfigError, DimensionError
from .nd import Conv2d, GroupNorm, Module, Tensor

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 20.0


def _ceil_half(n: int) -> int:
    return -(-n // 2)


def _groups(features: int, preferred: int = 8) -> int:
    return math.gcd(preferred, features)


@dataclass(frozen=True)
class TSConvPlusConfig:
    """Kernel sizes of one separable block.

    ``channel_count`` is the number of sensor channels at input resolution;
    the spatial kernel must stay strictly smaller so that it aggregates
    neighbouring sensors rather than the whole montage at once.
    """

    temporal_kernel: int
    spatial_kernel: int
    channel_count: int

    def __post_init__(self):
        for name in ("temporal_kernel", "spatial_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be an odd positive integer, got {k}")
        if self.channel_count < 1:
            raise ConfigError(f"channel_count must be positive, got {self.channel_count}")
        if self.spatial_kernel >= self.channel_count:
            raise ConfigError(
                f"spatial kernel {self.spatial_kernel} must be smaller than the "
                f"{self.channel_count} input channels")


@dataclass(frozen=True)
class VaeArchitecture:
    """Shape and width configuration of the encoder/decoder pair.

    ``widths`` are the feature counts at the three resolutions (the first is
    the stem output).  ``baseline`` swaps every spatial kernel for one that
    spans the full spatial extent at its resolution; it exists only so the
    separable design can be compared against that variant in tests.
    """

    channels: int
    samples: int
    stem_kernel: int = 25
    widths: tuple = (32, 64, 128)
    temporal_kernels: tuple = (15, 11, 7)
    spatial_kernel: int = 3
    latent_channels: int = 4
    baseline: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "temporal_kernels", tuple(int(k) for k in self.temporal_kernels))
        if self.channels < 1 or self.samples < 1:
            raise ConfigError(f"input extent must be positive, got ({self.channels}, {self.samples})")
        if len(self.widths) != 3 or len(self.temporal_kernels) != 3:
            raise ConfigError("widths and temporal_kernels need one entry per resolution (3)")
        if min(self.widths) < 1 or self.latent_channels < 1:
            raise ConfigError("feature counts must be positive")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError(f"stem kernel must be odd, got {self.stem_kernel}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        for k in self.temporal_kernels:
            TSConvPlusConfig(k, self.spatial_kernel, self.channels)

    @property
    def input_shape(self) -> tuple:
        return (1, self.channels, self.samples)

    @property
    def extents(self) -> list[tuple[int, int]]:
        """Spatial extent (H, W) at each of the three resolutions."""
        h, w = self.channels, self.samples
        out = [(h, w)]
        for _ in range(2):
            h, w = _ceil_half(h), _ceil_half(w)
            out.append((h, w))
        return out

    @property
    def latent_shape(self) -> tuple:
        h, w = self.extents[-1]
        return (self.latent_channels, h, w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["temporal_kernels"] = list(self.temporal_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeArchitecture":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentGaussian:
    """Diagonal Gaussian posterior; ``mu`` and ``log_var`` share a shape."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def shape(self) -> tuple:
        return self.mu.shape


@dataclass(frozen=True)
class VaeTrainConfig:
    beta: float = 1e-4
    warmup_epochs: int = 10
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    schedule: str = "cosine"
    batch_size: int = 64

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if not 0 < self.warmup_epochs <= self.epochs:
            raise ConfigError(f"need 0 < warmup_epochs <= epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


class ConvNormAct(Module):
    """Convolution, group normalisation and GELU."""

    def __init__(self, cin, cout, kernel, rng, stride=1, dtype=np.float32):
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, dtype=dtype)
        self.norm = GroupNorm(cout, _groups(cout), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return nd.gelu(self.norm(self.conv(x)))


class TSConvPlusBlock(Module):
    """Residual block: temporal (1, k_t) then spatial (k_s, 1) convolution.

    With ``spatial_kernel=None`` the spatial kernel is sized to the full
    extent of whatever input arrives (the collapsing baseline variant).
    """

    def __init__(self, cin: int, cout: int, temporal_kernel: int, spatial_kernel: Optional[int],
                 rng: np.random.Generator, channel_count: Optional[int] = None,
                 baseline_extent: Optional[int] = None, dtype=np.float32):
        if spatial_kernel is None:
            if baseline_extent is None:
                raise ConfigError("baseline block needs the spatial extent it will see")
            spatial_kernel = baseline_extent
        else:
            TSConvPlusConfig(temporal_kernel, spatial_kernel,
                             channel_count if channel_count is not None else spatial_kernel + 1)
        self.spatial_kernel = spatial_kernel
        self.temporal = ConvNormAct(cin, cout, (1, temporal_kernel), rng, dtype=dtype)
        self.spatial = ConvNormAct(cout, cout, (spatial_kernel, 1), rng, dtype=dtype)
        self.skip = Conv2d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"block expects (B, F, H, W), got {x.shape}")
        h = self.spatial(self.temporal(x))
        residual = self.skip(x) if self.skip is not None else x
        return h + residual


def tsconv_plus_block(x: Tensor, cfg: TSConvPlusConfig, rng: np.random.Generator,
                      features: Optional[int] = None) -> Tensor:
    """Apply a freshly initialised block to ``x`` (convenience for shape checks)."""
    cin = x.shape[1]
    block = TSConvPlusBlock(cin, features or cin, cfg.temporal_kernel, cfg.spatial_kernel, rng,
                            channel_count=cfg.channel_count, dtype=x.dtype)
    return block(x)


class TSCVAE(Module):
    """Encoder, reparameterisation and mirrored decoder."""

    def __init__(self, arch: VaeArchitecture, rng: np.random.Generator):
        self.arch = arch
        dt = np.dtype(arch.dtype)
        w0, w1, w2 = arch.widths
        k0, k1, k2 = arch.temporal_kernels
        ex = arch.extents
        C = arch.channels

        def block(cin, cout, k, level):
            ks = None if arch.baseline else arch.spatial_kernel
            return TSConvPlusBlock(cin, cout, k, ks, rng, channel_count=C,
                                   baseline_extent=ex[level][0], dtype=dt)

        self.stem = ConvNormAct(1, w0, (1, arch.stem_kernel), rng, dtype=dt)
        self.enc0 = block(w0, w0, k0, 0)
        self.down1 = ConvNormAct(w0, w1, 3, rng, stride=2, dtype=dt)
        self.enc1 = block(w1, w1, k1, 1)
        self.down2 = ConvNormAct(w1, w2, 3, rng, stride=2, dtype=dt)
        self.enc2 = block(w2, w2, k2, 2)
        d = arch.latent_channels
        self.head = Conv2d(w2, 2 * d, 1, rng, dtype=dt)
        self.head.bias.data[d:] = 0.0

        self.dec_in = ConvNormAct(d, w2, 1, rng, dtype=dt)
        self.dec2 = block(w2, w2, k2, 2)
        self.dec1 = block(w2, w1, k1, 1)
        self.dec0 = block(w1, w0, k0, 0)
        self.out = Conv2d(w0, 1, (1, arch.stem_kernel), rng, dtype=dt)

    @property
    def latent_shape(self) -> tuple:
        return self.arch.latent_shape

    def _batched(self, x: Tensor, expected: tuple, what: str) -> tuple[Tensor, bool]:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.arch.dtype)
        if x.shape == expected:
            return nd.reshape(x, (1,) + expected), True
        if x.ndim == len(expected) + 1 and x.shape[1:] == expected:
            return x, False
        raise DimensionError(f"{what}: expected {expected} or (B, *{expected}), got {x.shape}")

    def encode(self, x) -> LatentGaussian:
        """Posterior parameters for (1, C, T) or (B, 1, C, T) input."""
        xb, single = self._batched(x, self.arch.input_shape, "encode")
        h = self.enc0(self.stem(xb))
        h = self.enc1(self.down1(h))
        h = self.enc2(self.down2(h))
        stats = self.head(h)
        d = self.arch.latent_channels
        mu = stats[:, :d]
        log_var = nd.clamp(stats[:, d:], LOG_VAR_MIN, LOG_VAR_MAX)
        if single:
            mu, log_var = mu[0], log_var[0]
        return LatentGaussian(mu, log_var)

    def decode(self, z) -> Tensor:
        """Reconstruction of shape (1, C, T) or (B, 1, C, T)."""
        zb, single = self._batched(z, self.latent_shape, "decode")
        ex = self.arch.extents
        h = self.dec2(self.dec_in(zb))
        h = nd.resize2d(nd.upsample_nearest2x(h), *ex[1])
        h = self.dec1(h)
        h = nd.resize2d(nd.upsample_nearest2x(h), *ex[0])
        h = self.dec0(h)
        out = self.out(h)
        return out[0] if single else out

    def forward(self, x, rng: Optional[np.random.Generator] = None):
        """Reconstruct ``x``; samples the latent when ``rng`` is given, else uses the mean."""
        lat = self.encode(x)
        z = reparameterize(lat, rng) if rng is not None else lat.mu
        return self.decode(z), lat


def reparameterize(lat: LatentGaussian, rng: np.random.Generator) -> Tensor:
    """``mu + eps * exp(log_var / 2)`` with ``eps`` drawn from ``rng``."""
    eps = rng.standard_normal(lat.shape, dtype=lat.mu.dtype.type)
    std = nd.exp(lat.log_var * 0.5)
    return lat.mu + std * Tensor(eps)


def kl_gaussian(lat: LatentGaussian) -> Tensor:
    """KL(q || N(0, I)) summed over latent elements and averaged over the batch.

    Inputs with four axes are treated as (B, d, H, W); anything else is a
    single posterior.
    """
    mu, lv = lat.mu, lat.log_var
    per_elem = mu * mu + (nd.expm1(lv) - lv)
    total = per_elem.sum() * 0.5
    if mu.ndim == 4:
        return total / float(mu.shape[0])
    return total


def elbo_terms(x_hat: Tensor, x: Tensor, lat: LatentGaussian, beta_cur: float):
    """Return ``(loss, reconstruction, kl)`` with ``loss = rec + beta_cur * kl``."""
    rec = nd.mse_loss(x_hat, x)
    kl = kl_gaussian(lat)
    return rec + kl * float(beta_cur), rec, kl


def elbo_loss(x_hat: Tensor, x: Tensor, lat: LatentGaussian, beta_cur: float) -> Tensor:
    return elbo_terms(x_hat, x, lat, beta_cur)[0]


def kl_warmup(epoch: int, cfg: VaeTrainConfig) -> float:
    """KL weight for a 1-based epoch: linear ramp to ``beta`` over ``warmup_epochs``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside 1..{cfg.epochs}")
    return cfg.beta * min(1.0, epoch / cfg.warmup_epochs)
