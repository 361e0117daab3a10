"""Composite and normalisation primitives used by the models and losses."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, make_result, mean, reshape, sub

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), adjoint)


def normalize(x: Tensor, axes: Sequence[int], eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-(population)-variance over ``axes``; no affine part."""
    axes = tuple(a % x.ndim for a in axes)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    out = centered * inv

    def adjoint(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gym),)

    return make_result(out, "normalize", (x,), adjoint)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply learned scale and shift."""
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {weight.shape}/{bias.shape} vs input {x.shape}")
    return normalize(x, (-1,), eps) * weight + bias


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation for (B, F, H, W) feature maps."""
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects (B, F, H, W), got {x.shape}")
    b, f, h, w = x.shape
    if f % groups:
        raise ConfigError(f"{f} features cannot be split into {groups} groups")
    grouped = reshape(x, (b, groups, f // groups, h, w))
    normed = reshape(normalize(grouped, (2, 3, 4), eps), (b, f, h, w))
    return normed * reshape(weight, (1, f, 1, 1)) + reshape(bias, (1, f, 1, 1))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def adjoint(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result(out.astype(xd.dtype, copy=False), "gelu", (x,), adjoint)


def sort(x: Tensor, axis: int = -1) -> Tensor:
    """Ascending stable sort; the adjoint scatters through the permutation."""
    perm = np.argsort(x.data, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, perm, axis=axis)

    def adjoint(g):
        gx = np.empty_like(g)
        np.put_along_axis(gx, perm, g, axis=axis)
        return (gx,)

    return make_result(out, "sort", (x,), adjoint)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, "concatenate", tensors, adjoint)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(diff * diff)
