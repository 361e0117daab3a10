"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ConfigError, DimensionError
from .conv import conv2d
from .functional import group_norm, layer_norm
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that is trained by default."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None, name=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype, name=name)


class Module:
    """Base class; parameters and sub-modules are discovered from attributes.

    Discovery follows attribute insertion order, which fixes parameter
    naming and ordering for checkpoints and optimiser state.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    # draw in the target dtype directly; float32 draws halve init time and memory for big heads
    u = rng.random(shape, dtype=np.dtype(dtype).type)
    u *= 2.0 * bound
    u -= bound
    return u


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(_uniform(rng, (fan_in, fan_out), bound, dtype))
        self.bias = Parameter(_uniform(rng, (fan_out,), bound, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """Convolution layer with fan-in scaled uniform initialisation."""

    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator,
                 stride=1, padding: str = "same", dtype=np.float32):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        bound = 1.0 / math.sqrt(cin * kh * kw)
        self.weight = Parameter(_uniform(rng, (cout, cin, kh, kw), bound, dtype))
        self.bias = Parameter(_uniform(rng, (cout,), bound, dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, features: int, groups: int, dtype=np.float32, eps: float = 1e-5):
        if features % groups:
            raise ConfigError(f"{features} features not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(features, dtype=dtype))
        self.bias = Parameter(np.zeros(features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)
