"""Transformer building blocks: attention, feed-forward, dropout, init.

Both sub-layers are post-norm: the residual sum goes through layer_norm.
Dropout uses inverted scaling, so evaluation is the exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor, embedding_lookup

__all__ = [
    "AttentionMap",
    "AttentionWeights",
    "FfnWeights",
    "dropout_mask",
    "embedding_lookup",
    "ffn_block",
    "kaiming_init",
    "multi_head_attention",
]


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, requires_grad: bool = True) -> Tensor:
    """Zero-mean normal draw with std sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ConfigError(f"kaiming_init fan_in must be positive, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def dropout_mask(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Zero entries with probability rate and scale survivors by 1/(1-rate).

    Outside training (or at rate 0) the input tensor is returned unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(size=x.shape) >= rate
    return T.mul_const(x, keep / (1.0 - rate))


@dataclass
class AttentionWeights:
    """Projection weights for all heads, stored with per-head columns grouped.

    query/key/value are (d, d); column block h*head_dim:(h+1)*head_dim is the
    projection of head h.  output maps the concatenated head outputs back to d.
    ln_gamma/ln_beta are the post-residual layer_norm affine parameters.
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    heads: int
    ln_gamma: Tensor
    ln_beta: Tensor

    def __post_init__(self) -> None:
        d = self.query.shape[0]
        if self.heads <= 0 or d % self.heads != 0:
            raise ConfigError(f"head count {self.heads} must divide model width {d}")

    @property
    def dim(self) -> int:
        return self.query.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class AttentionMap:
    """Detached row-stochastic attention probabilities from one attention call."""

    per_head: np.ndarray  # (heads, n, n)
    averaged: np.ndarray = field(init=False)  # (n, n), mean over heads

    def __post_init__(self) -> None:
        self.averaged = self.per_head.mean(axis=0)


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    n = x.shape[0]
    return T.permute(T.reshape(x, (n, heads, head_dim)), (1, 0, 2))


def multi_head_attention(
    x: Tensor,
    w: AttentionWeights,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionMap]:
    """Scaled dot-product self-attention with residual add and layer_norm.

    Returns the sub-layer output and the pre-dropout attention map (each row
    sums to 1); the map is detached data for inspection and token selection.
    """
    if x.data.ndim != 2 or x.shape[1] != w.dim:
        raise T.ShapeError(f"attention input {x.shape} does not match width {w.dim}")
    n = x.shape[0]
    h, dh = w.heads, w.head_dim
    q = _split_heads(T.matmul(x, w.query), h, dh)
    k = _split_heads(T.matmul(x, w.key), h, dh)
    v = _split_heads(T.matmul(x, w.value), h, dh)
    scores = T.scale(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    probs = T.softmax_rows(scores)
    attn_map = AttentionMap(per_head=probs.data.copy())
    probs = dropout_mask(probs, dropout_rate, training, rng)
    ctx = T.bmm(probs, v)  # (h, n, dh)
    merged = T.reshape(T.permute(ctx, (1, 0, 2)), (n, h * dh))
    out = T.matmul(merged, w.output)
    out = dropout_mask(out, dropout_rate, training, rng)
    return T.layer_norm(T.add(x, out), w.ln_gamma, w.ln_beta), attn_map


@dataclass
class FfnWeights:
    """Position-wise feed-forward weights with the post-residual layer_norm."""

    w1: Tensor  # (d, hidden)
    w2: Tensor  # (hidden, d)
    ln_gamma: Tensor
    ln_beta: Tensor


def ffn_block(
    x: Tensor,
    w: FfnWeights,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """layer_norm(x + W2 gelu(W1 x)), preserving the input shape."""
    if x.data.ndim != 2 or x.shape[1] != w.w1.shape[0]:
        raise T.ShapeError(f"ffn input {x.shape} does not match weight {w.w1.shape}")
    inner = T.matmul(T.gelu(T.matmul(x, w.w1)), w.w2)
    inner = dropout_mask(inner, dropout_rate, training, rng)
    return T.layer_norm(T.add(x, inner), w.ln_gamma, w.ln_beta)
