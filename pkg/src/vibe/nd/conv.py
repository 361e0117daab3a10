"""2-D convolution and resampling primitives for (B, F, H, W) feature maps."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor, make_result


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def output_extent(size: int, kernel: int, stride: int, padding: str) -> int:
    """Output length along one axis for ``"same"`` or ``"valid"`` padding."""
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ConfigError(f"unknown padding mode {padding!r}")


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` (B, Cin, H, W) with ``kernel`` (Cout, Cin, kh, kw).

    ``"same"`` zero-pads so that the output extent is ``ceil(in / stride)``;
    ``"valid"`` uses no padding.  The kernel is applied tap by tap, each tap
    being one (Cout x Cin) matrix product over all output positions.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: kernel expects {kcin} input features, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ConfigError(f"stride must be positive, got {(sh, sw)}")
    if padding == "same":
        ph, pw = _same_pads(h, kh, sh), _same_pads(w, kw, sw)
    elif padding == "valid":
        ph, pw = (0, 0), (0, 0)
    else:
        raise ConfigError(f"unknown padding mode {padding!r}")
    hp, wp = h + sum(ph), w + sum(pw)
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {(kh, kw)} exceeds padded input {(hp, wp)}")
    if not (np.isfinite(x.data).all() and np.isfinite(kernel.data).all()):
        raise NumericError("conv2d received non-finite values")
    ho = output_extent(h, kh, sh, padding)
    wo = output_extent(w, kw, sw, padding)

    # channel-major layout so every tap is a plain (Cout, Cin) @ (Cin, B*Ho*Wo)
    xt = x.data.transpose(1, 0, 2, 3)
    if any(ph) or any(pw):
        xt = np.pad(xt, ((0, 0), (0, 0), ph, pw))
    xt = np.ascontiguousarray(xt)
    wd = kernel.data

    def window(i, j):
        return xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]

    acc = np.zeros((cout, b, ho, wo), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(wd[:, :, i, j], window(i, j), axes=([1], [0]))
    if bias is not None:
        acc += bias.data[:, None, None, None]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def adjoint(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gk[:, :, i, j] = np.tensordot(gt, window(i, j), axes=([1, 2, 3], [1, 2, 3]))
        if x.requires_grad:
            gxt = np.zeros(xt.shape, dtype=xt.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                        np.tensordot(wd[:, :, i, j].T, gt, axes=([1], [0]))
            gxt = gxt[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result(out, "conv2d", inputs, adjoint)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat every element of the last two axes twice."""
    if x.ndim != 4:
        raise DimensionError(f"upsample expects (B, F, H, W), got {x.shape}")
    b, f, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def adjoint(g):
        return (g.reshape(b, f, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, "upsample_nearest2x", (x,), adjoint)


def linear_resize_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """(dst, src) matrix of linear interpolation with half-pixel centres."""
    m = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for o in range(dst):
        pos = min(max((o + 0.5) * scale - 0.5, 0.0), src - 1.0)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def resize_axis(x: Tensor, size: int, axis: int) -> Tensor:
    """Linearly resample ``x`` to ``size`` samples along ``axis``."""
    axis = axis % x.ndim
    src = x.shape[axis]
    if src == size:
        return x
    m = linear_resize_matrix(src, size, x.dtype)
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ m.T, -1, axis)

    def adjoint(g):
        return (np.moveaxis(np.moveaxis(g, axis, -1) @ m, -1, axis),)

    return make_result(np.ascontiguousarray(out), "resize_axis", (x,), adjoint)


def resize2d(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of the last two axes (separable)."""
    return resize_axis(resize_axis(x, height, 2), width, 3)
