"""Query-token transformer mapping visual token embeddings to neural latents.

A fixed set of learnable queries attends to itself in every layer and to
the visual tokens in every ``cross_attn_every``-th layer.  A two-layer head
flattens the final queries and reshapes them to the VAE latent shape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import nd
from .errors import ConfigError, ContractError, DimensionError
from .losses import AlignmentLossConfig, ProjectionStream, alignment_terms
from .nd import LayerNorm, Linear, Module, Parameter, Tensor
from .vae import reparameterize


@dataclass(frozen=True)
class QFormerConfig:
    """Sizes of the query transformer and its projection head.

    ``embed_dim`` is the width of the incoming visual tokens; when it
    differs from ``hidden_dim`` a learned linear map reconciles the two.
    """

    num_queries: int = 64
    hidden_dim: int = 768
    layers: int = 6
    heads: int = 8
    mlp_ratio: float = 4.0
    cross_attn_every: int = 2
    embed_dim: int = 768
    head_hidden: int = 4096
    output_latent_shape: Optional[tuple] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.output_latent_shape is not None:
            object.__setattr__(self, "output_latent_shape", tuple(int(s) for s in self.output_latent_shape))
        for name in ("num_queries", "hidden_dim", "layers", "heads", "cross_attn_every",
                     "embed_dim", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.mlp_ratio <= 0 or int(round(self.hidden_dim * self.mlp_ratio)) < 1:
            raise ConfigError(f"mlp_ratio must give a positive hidden width, got {self.mlp_ratio}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    def has_cross_attention(self, layer_index: int) -> bool:
        """True for 1-based layer indices that are multiples of ``cross_attn_every``."""
        return layer_index % self.cross_attn_every == 0

    @property
    def latent_size(self) -> int:
        if self.output_latent_shape is None:
            raise ConfigError("output_latent_shape is not set")
        return int(np.prod(self.output_latent_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["output_latent_shape"] is not None:
            d["output_latent_shape"] = list(d["output_latent_shape"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QFormerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown Q-Former fields {sorted(unknown)}")
        return cls(**d)


class MultiHeadAttention(Module):
    """Unmasked scaled dot-product attention with separate q/k/v/out maps.

    When ``record`` is set the last attention probabilities are kept in
    ``last_weights`` with shape (B, heads, Lq, Lk).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.record = False
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return nd.transpose(nd.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, query: Tensor, context: Tensor) -> Tensor:
        b, lq, dim = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        scores = (q @ nd.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        weights = nd.softmax(scores, axis=-1)
        if self.record:
            self.last_weights = weights.data
        mixed = nd.transpose(weights @ v, (0, 2, 1, 3))
        return self.out(nd.reshape(mixed, (b, lq, dim)))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nd.gelu(self.fc1(x)))


class QFormerLayer(Module):
    """Post-norm layer: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, cfg: QFormerConfig, cross: bool, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        dim = cfg.hidden_dim
        self.self_attn = MultiHeadAttention(dim, cfg.heads, rng, dtype=dt)
        self.norm_sa = LayerNorm(dim, dtype=dt)
        self.cross_attn = MultiHeadAttention(dim, cfg.heads, rng, dtype=dt) if cross else None
        self.norm_ca = LayerNorm(dim, dtype=dt) if cross else None
        self.ffn = FeedForward(dim, int(round(dim * cfg.mlp_ratio)), rng, dtype=dt)
        self.norm_ffn = LayerNorm(dim, dtype=dt)

    @property
    def attention_modules(self) -> list:
        return [m for m in (self.self_attn, self.cross_attn) if m is not None]

    def forward(self, q: Tensor, tokens: Tensor) -> Tensor:
        q = self.norm_sa(self.self_attn(q, q) + q)
        if self.cross_attn is not None:
            q = self.norm_ca(self.cross_attn(q, tokens) + q)
        return self.norm_ffn(self.ffn(q) + q)


class QFormer(Module):
    """Learnable queries refined by ``cfg.layers`` layers over visual tokens."""

    def __init__(self, cfg: QFormerConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        self.queries = Parameter(rng.standard_normal((cfg.num_queries, cfg.hidden_dim)).astype(dt) * 0.02)
        self.input_proj = (Linear(cfg.embed_dim, cfg.hidden_dim, rng, dtype=dt)
                           if cfg.embed_dim != cfg.hidden_dim else None)
        self.layers = [QFormerLayer(cfg, cfg.has_cross_attention(i + 1), rng) for i in range(cfg.layers)]

    def record_attention(self, enabled: bool = True) -> None:
        for layer in self.layers:
            for attn in layer.attention_modules:
                attn.record = enabled

    def attention_weights(self) -> list[np.ndarray]:
        return [a.last_weights for layer in self.layers for a in layer.attention_modules]

    def _tokens(self, e_v) -> tuple[Tensor, bool]:
        if not isinstance(e_v, Tensor):
            e_v = Tensor(e_v, dtype=self.cfg.dtype)
        if e_v.ndim == 2:
            e_v, single = nd.reshape(e_v, (1,) + e_v.shape), True
        elif e_v.ndim == 3:
            single = False
        else:
            raise DimensionError(f"visual tokens must be (N, D) or (B, N, D), got {e_v.shape}")
        if e_v.shape[-1] != self.cfg.embed_dim:
            raise DimensionError(f"token width {e_v.shape[-1]} != configured {self.cfg.embed_dim}")
        return e_v, single

    def forward(self, e_v) -> Tensor:
        tokens, single = self._tokens(e_v)
        if self.input_proj is not None:
            tokens = self.input_proj(tokens)
        b = tokens.shape[0]
        q = nd.broadcast_to(self.queries, (b,) + self.queries.shape)
        for layer in self.layers:
            q = layer(q, tokens)
        return q[0] if single else q


class ProjectionHead(Module):
    """Flatten the queries, two affine maps with GELU between, reshape to the latent."""

    def __init__(self, cfg: QFormerConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self.latent_shape = cfg.output_latent_shape
        size = cfg.latent_size
        self.fc1 = Linear(cfg.num_queries * cfg.hidden_dim, cfg.head_hidden, rng, dtype=dt)
        self.fc2 = Linear(cfg.head_hidden, size, rng, dtype=dt)

    def forward(self, q: Tensor) -> Tensor:
        single = q.ndim == 2
        b = 1 if single else q.shape[0]
        flat = nd.reshape(q, (b, -1))
        out = nd.reshape(self.fc2(nd.gelu(self.fc1(flat))), (b,) + self.latent_shape)
        return out[0] if single else out


class Mapper(Module):
    """Q-Former plus projection head: visual tokens to a neural proxy latent."""

    def __init__(self, cfg: QFormerConfig, rng: np.random.Generator):
        if cfg.output_latent_shape is None:
            raise ConfigError("output_latent_shape must be set to build the projection head")
        self.cfg = cfg
        self.qformer = QFormer(cfg, rng)
        self.head = ProjectionHead(cfg, rng)

    def forward(self, e_v) -> Tensor:
        return self.head(self.qformer(e_v))


def latent_targets(encoder, x, target: str = "mean", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Frozen-encoder latents for a batch of recordings, without recording a graph."""
    if target not in ("mean", "sample"):
        raise ConfigError(f"unknown target {target!r}")
    with nd.no_grad():
        lat = encoder.encode(x)
        if target == "mean":
            return lat.mu
        if rng is None:
            raise ConfigError("sample targets need a random stream")
        return reparameterize(lat, rng)


def assert_frozen(encoder) -> None:
    """Raise if any encoder parameter is trainable or carries a gradient."""
    for name, p in encoder.named_parameters():
        if p.requires_grad or p.grad is not None:
            raise ContractError(f"encoder parameter {name} is not frozen")


def stage2_step(mapper: Mapper, encoder, e_v, x, loss_cfg: AlignmentLossConfig,
                stream: Optional[ProjectionStream] = None, target: str = "mean",
                rng: Optional[np.random.Generator] = None):
    """Forward and backward pass of one alignment step.

    Returns ``(total, mse, swd)`` as tensors; gradients are left on the
    mapper parameters for the caller's optimiser.  The encoder must be
    frozen before and stays untouched after.
    """
    assert_frozen(encoder)
    z = latent_targets(encoder, x, target, rng)
    z_hat = mapper(e_v)
    if z_hat.shape != z.shape:
        raise DimensionError(f"proxy latent {z_hat.shape} != encoder latent {z.shape}")
    total, mse, sw = alignment_terms(z_hat, z, loss_cfg, stream=stream)
    total.backward()
    assert_frozen(encoder)
    return total, mse, sw
