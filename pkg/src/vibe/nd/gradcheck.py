"""Central finite-difference oracles for checking analytic gradients.

These never touch the tape: they perturb raw arrays in place and read the
forward value only, so they stay independent of the backward rules they
are used to verify.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are zero in exact arithmetic (for example
    a bias followed by a normalisation that cancels it) from turning
    finite-difference round-off into a relative error of one.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numerical_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-4,
                   indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``array``.

    ``array`` is perturbed in place and restored.  When ``indices`` is
    given only those entries are estimated (the rest stay zero).
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    coords = indices if indices is not None else list(np.ndindex(array.shape))
    for idx in coords:
        orig = array[idx]
        array[idx] = orig + eps
        up = f()
        array[idx] = orig - eps
        down = f()
        array[idx] = orig
        grad[idx] = (up - down) / (2.0 * eps)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                    max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None
                    ) -> list[float]:
    """Compare backward gradients of ``loss_fn()`` with central differences.

    Returns one relative error per tensor.  ``max_entries`` subsamples the
    coordinates of large tensors (the analytic side is compared on the same
    coordinates).
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    def value() -> float:
        with no_grad():
            return loss_fn().item()

    errors = []
    for t, ga in zip(tensors, analytic):
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in sorted(flat)]
        gn = numerical_grad(value, t.data, eps, indices)
        if indices is not None:
            sel = tuple(np.array(ix) for ix in zip(*indices))
            errors.append(relative_error(ga[sel], gn[sel]))
        else:
            errors.append(relative_error(ga, gn))
    return errors


def directional_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Relative error of ``<grad, v>`` against ``(f(x+eps v) - f(x-eps v)) / 2 eps``.

    ``v`` is one random unit direction over the concatenation of all
    tensors: two forward passes check every coordinate at once.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((np.zeros(t.shape) if t.grad is None else t.grad * d).sum())
                   for t, d in zip(tensors, dirs))
    originals = [t.data.copy() for t in tensors]

    def shifted(sign: float) -> float:
        for t, o, d in zip(tensors, originals, dirs):
            t.data[...] = o + sign * eps * d
        with no_grad():
            return loss_fn().item()

    up, down = shifted(1.0), shifted(-1.0)
    for t, o in zip(tensors, originals):
        t.data[...] = o
    numeric = (up - down) / (2.0 * eps)
    scale = max(abs(analytic), abs(numeric))
    return 0.0 if scale < 1e-12 else abs(analytic - numeric) / scale
