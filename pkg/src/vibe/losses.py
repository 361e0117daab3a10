"""Alignment objective: point-wise MSE plus a sliced Wasserstein term."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import nd
from .errors import ConfigError, ContractError
from .nd import Tensor

SeedLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True)
class AlignmentLossConfig:
    """``lam`` weights the SWD term; ``num_projections`` random directions per call.

    ``projection_axis="channel"`` projects the d-dimensional channel vector at
    every (batch, h, w) location; ``"flat"`` treats each whole flattened
    latent as one sample and is kept only for comparison.
    """

    lam: float = 1.0
    num_projections: int = 50
    projection_seed: int = 0
    projection_axis: str = "channel"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.num_projections < 1:
            raise ConfigError(f"need at least one projection, got {self.num_projections}")
        if self.projection_axis not in ("channel", "flat"):
            raise ConfigError(f"unknown projection axis {self.projection_axis!r}")


class ProjectionStream:
    """Seeded source of fresh projection sets, one per draw."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def draw(self, dim: int, count: int) -> np.ndarray:
        return sample_projections(dim, count, self.rng)


def _as_rng(seed: SeedLike) -> np.random.Generator:
    if hasattr(seed, "standard_normal"):
        return seed
    return np.random.default_rng(seed)


def sample_projections(dim: int, count: int, seed: SeedLike = None) -> np.ndarray:
    """``count`` directions uniform on the unit sphere in R^dim, shape (count, dim)."""
    if dim < 1 or count < 1:
        raise ConfigError(f"need dim >= 1 and count >= 1, got {dim}, {count}")
    rng = _as_rng(seed)
    theta = rng.standard_normal((count, dim))
    norms = np.linalg.norm(theta, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        theta[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(theta, axis=1)
    return theta / norms[:, None]


def w1_1d(a, b) -> Tensor:
    """Wasserstein-1 distance between two equal-size empirical 1-D samples.

    Both inputs are sorted (stable, so ties keep index order) and the mean
    absolute difference of the order statistics is returned.
    """
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64).ravel())
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64).ravel())
    if a.ndim != 1 or b.ndim != 1:
        raise ContractError(f"w1_1d expects 1-d samples, got {a.shape} and {b.shape}")
    if a.shape != b.shape or a.size == 0:
        raise ContractError(f"w1_1d needs equal non-empty lengths, got {a.size} and {b.size}")
    return nd.abs_(nd.sort(a) - nd.sort(b)).mean()


def _samples(x: Tensor, axis: str) -> Tensor:
    if axis == "flat":
        return nd.reshape(x, (x.shape[0], -1))
    if x.ndim < 2:
        raise ContractError(f"channel reading needs (B, d, ...) input, got {x.shape}")
    # (B, d, H, W) -> (B*H*W, d)
    order = (0,) + tuple(range(2, x.ndim)) + (1,)
    return nd.reshape(nd.transpose(x, order), (-1, x.shape[1]))


def swd(z_hat: Tensor, z: Tensor, cfg: AlignmentLossConfig,
        projections: Optional[np.ndarray] = None,
        stream: Optional[ProjectionStream] = None) -> Tensor:
    """Sliced Wasserstein-1 distance between the sample clouds of two latents.

    Projections come from, in order of preference: the explicit
    ``projections`` array, the next draw of ``stream``, or a fresh generator
    seeded with ``cfg.projection_seed``.
    """
    z_hat = z_hat if isinstance(z_hat, Tensor) else Tensor(z_hat)
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z_hat.shape != z.shape:
        raise ContractError(f"swd: shapes differ, {z_hat.shape} vs {z.shape}")
    xs, ys = _samples(z_hat, cfg.projection_axis), _samples(z, cfg.projection_axis)
    dim = xs.shape[1]
    if projections is None:
        if stream is not None:
            projections = stream.draw(dim, cfg.num_projections)
        else:
            projections = sample_projections(dim, cfg.num_projections, cfg.projection_seed)
    if projections.shape[1] != dim:
        raise ContractError(f"projections have dim {projections.shape[1]}, samples have {dim}")
    theta = Tensor(projections.T.astype(z_hat.dtype, copy=False))
    px = nd.sort(xs @ theta, axis=0)
    py = nd.sort(ys @ theta, axis=0)
    # mean over samples per projection, then over projections: one global mean
    return nd.abs_(px - py).mean()


def alignment_terms(z_hat: Tensor, z: Tensor, cfg: AlignmentLossConfig,
                    projections: Optional[np.ndarray] = None,
                    stream: Optional[ProjectionStream] = None):
    """``(total, mse, swd)`` with ``total = mse + lam * swd`` in float64.

    The combination is done in double precision so that the logged parts
    reproduce the logged total to rounding of a single addition.  The SWD
    term is evaluated even when ``lam`` is zero so it can still be logged.
    """
    if z_hat.shape != z.shape:
        raise ContractError(f"alignment: shapes differ, {z_hat.shape} vs {z.shape}")
    mse = nd.astype(nd.mse_loss(z_hat, z), np.float64)
    sw = nd.astype(swd(z_hat, z, cfg, projections, stream), np.float64)
    return mse + sw * float(cfg.lam), mse, sw


def alignment_loss(z_hat: Tensor, z: Tensor, cfg: AlignmentLossConfig,
                   projections: Optional[np.ndarray] = None,
                   stream: Optional[ProjectionStream] = None) -> Tensor:
    return alignment_terms(z_hat, z, cfg, projections, stream)[0]
