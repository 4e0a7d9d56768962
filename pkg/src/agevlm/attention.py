"""Multi-head causal self-attention and cross-attention over visual tokens.

The cross-attention block exposes its post-softmax weights so the guidance
loss can supervise where text queries look in the visual grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, ShapeError


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionRecord:
    """Post-softmax cross-attention weights for one layer."""

    layer_index: int
    weights: Tensor  # [n_heads, T_query, N_visual]
    aggregated: Optional[Tensor] = field(default=None)  # [h, w], set by guidance


def _init(rng: np.random.Generator, shape, scale=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape))


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    t = x.shape[0]
    return T.transpose(T.reshape(x, (t, n_heads, head_dim)), (1, 0, 2))


def _merge_heads(x: Tensor, d_model: int) -> Tensor:
    t = x.shape[1]
    return T.reshape(T.transpose(x, (1, 0, 2)), (t, d_model))


class SelfAttention:
    """Causal scaled-dot-product attention over one sequence."""

    def __init__(self, config: AttentionConfig, name: str, rng: np.random.Generator):
        d = config.d_model
        self.config = config
        self.w_q = Parameter(_init(rng, (d, d)), f"{name}.w_q")
        self.w_k = Parameter(_init(rng, (d, d)), f"{name}.w_k")
        self.w_v = Parameter(_init(rng, (d, d)), f"{name}.w_v")
        self.w_o = Parameter(_init(rng, (d, d)), f"{name}.w_o")

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def __call__(self, h: Tensor, causal: bool = True) -> Tensor:
        cfg = self.config
        t = h.shape[0]
        q = _split_heads(h @ self.w_q.value, cfg.n_heads, cfg.head_dim)
        k = _split_heads(h @ self.w_k.value, cfg.n_heads, cfg.head_dim)
        v = _split_heads(h @ self.w_v.value, cfg.n_heads, cfg.head_dim)
        scores = T.mul(q @ T.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(cfg.head_dim))
        mask = np.tril(np.ones((t, t), dtype=bool)) if causal else None
        probs = T.softmax(scores, axis=-1, mask=mask)
        out = _merge_heads(probs @ v, cfg.d_model)
        return out @ self.w_o.value


class CrossAttention:
    """Text queries attend over visual tokens; no masking on either side.

    The output projection is zero-initialized so a fresh cross-attention
    block is an exact no-op on the residual stream.
    """

    def __init__(self, config: AttentionConfig, name: str, rng: np.random.Generator):
        d = config.d_model
        self.config = config
        self.w_q = Parameter(_init(rng, (d, d)), f"{name}.w_q")
        self.w_k = Parameter(_init(rng, (d, d)), f"{name}.w_k")
        self.w_v = Parameter(_init(rng, (d, d)), f"{name}.w_v")
        self.w_o = Parameter(Tensor(np.zeros((d, d))), f"{name}.w_o")

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def __call__(self, h: Tensor, visual: Tensor) -> tuple[Tensor, Tensor]:
        """Return (output [T, d], post-softmax weights [n_heads, T, N])."""
        if visual.shape[0] == 0:
            raise ShapeError("empty visual sequence")
        if visual.shape[1] != h.shape[1]:
            raise ShapeError(f"width mismatch: text {h.shape} vs visual {visual.shape}")
        cfg = self.config
        q = _split_heads(h @ self.w_q.value, cfg.n_heads, cfg.head_dim)
        k = _split_heads(visual @ self.w_k.value, cfg.n_heads, cfg.head_dim)
        v = _split_heads(visual @ self.w_v.value, cfg.n_heads, cfg.head_dim)
        scores = T.mul(q @ T.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(cfg.head_dim))
        probs = T.softmax(scores, axis=-1)
        out = _merge_heads(probs @ v, cfg.d_model) @ self.w_o.value
        return out, probs
