"""Two parameter-shared encoder streams that exchange low-attention tokens.

Every layer runs attention then feed-forward on both streams with the same
weights.  Inside the configured layer window, the tokens each stream's cls
attends to least are updated by adding the mean of the other stream's
pre-update non-cls rows; the cls row itself is never exchanged.  Selection is
hard routing: gradients flow through the added means but not the ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import AttentionMap, AttentionWeights, FfnWeights, ffn_block, multi_head_attention
from .tensor import ConfigError, Tensor

__all__ = [
    "ExchangeConfig",
    "ExchangeLayerTrace",
    "ExchangeTrace",
    "LayerWeights",
    "ModalityStream",
    "cls_attention_scores",
    "cross_forward",
    "exchange_update",
    "fuse_outputs",
    "prepend_cls",
    "select_exchange_tokens",
]


@dataclass
class ExchangeConfig:
    """Shape of the exchange window: layers mu+1..eta swap theta of the tokens."""

    theta: float = 0.1
    mu: int = 2
    eta: int = 4
    num_layers: int = 6
    heads: int = 4
    dim: int = 32

    def validate(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if not 0 <= self.mu <= self.eta <= self.num_layers:
            raise ConfigError(
                f"layer window needs 0 <= mu <= eta <= num_layers, got "
                f"mu={self.mu} eta={self.eta} num_layers={self.num_layers}"
            )
        if self.heads <= 0 or self.dim % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")


@dataclass
class LayerWeights:
    """One encoder layer: attention sub-layer then feed-forward sub-layer."""

    attn: AttentionWeights
    ffn: FfnWeights


@dataclass
class ModalityStream:
    """A stream's embeddings with its modality tag; row 0 is the cls token."""

    embeddings: Tensor
    modality: str
    token_count: int

    def __post_init__(self) -> None:
        if self.embeddings.shape[0] != self.token_count + 1:
            raise T.ShapeError(
                f"{self.modality} stream has {self.embeddings.shape[0]} rows "
                f"for {self.token_count} tokens plus cls"
            )


@dataclass
class ExchangeLayerTrace:
    layer: int
    text_selected: list[int]
    image_selected: list[int]
    text_cls_scores: list[float]
    image_cls_scores: list[float]


@dataclass
class ExchangeTrace:
    """Per-exchange-layer record of selections and the scores behind them."""

    layers: list[ExchangeLayerTrace] = field(default_factory=list)
    # full per-layer maps (text_map, image_map), kept in memory for diagnostics
    attention_maps: list[tuple[AttentionMap, AttentionMap]] | None = None

    def to_json_dict(self) -> dict:
        return {
            "layers": [
                {
                    "layer": entry.layer,
                    "text_selected": list(entry.text_selected),
                    "image_selected": list(entry.image_selected),
                    "text_cls_scores": list(entry.text_cls_scores),
                    "image_cls_scores": list(entry.image_cls_scores),
                }
                for entry in self.layers
            ]
        }


def prepend_cls(embeddings: Tensor, cls_vector: Tensor) -> Tensor:
    """Stack a learned cls row on top of the token embeddings."""
    if embeddings.data.ndim != 2:
        raise T.ShapeError(f"prepend_cls needs a matrix, got shape {embeddings.shape}")
    d = embeddings.shape[1]
    if cls_vector.data.size != d:
        raise T.ShapeError(f"cls vector size {cls_vector.data.size} does not match width {d}")
    return T.concat_rows(T.reshape(cls_vector, (1, d)), embeddings)


def cls_attention_scores(attn_map: AttentionMap) -> np.ndarray:
    """How much the cls row attends to each token: head-averaged first row,
    with the cls-to-cls entry dropped.  scores[i] belongs to stream row i+1."""
    return attn_map.averaged[0, 1:].copy()


def select_exchange_tokens(scores: np.ndarray, theta: float) -> list[int]:
    """Stream indices of the floor(theta*n) lowest-scoring tokens, ascending.

    Ties prefer the lower index; index 0 (cls) can never appear because
    scores[0] already belongs to stream row 1.
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must be in [0, 1], got {theta}")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    k = int(np.floor(theta * n))
    if k == 0:
        return []
    order = np.argsort(scores, kind="stable")  # stable sort keeps lower index first on ties
    return sorted(int(i) + 1 for i in order[:k])


def exchange_update(
    text: Tensor,
    image: Tensor,
    text_selected: list[int],
    image_selected: list[int],
) -> tuple[Tensor, Tensor]:
    """Add the other stream's mean non-cls row to each selected row.

    Both means are taken from the pre-update streams, so the two updates are
    simultaneous and order-independent.  Non-selected rows are returned
    bit-for-bit unchanged; selecting row 0 is an error.
    """
    for name, stream, selected in (("text", text, text_selected), ("image", image, image_selected)):
        for idx in selected:
            if idx == 0:
                raise ValueError(f"{name} selection includes the cls row")
            if not 1 <= idx < stream.shape[0]:
                raise T.ShapeError(
                    f"{name} selection index {idx} out of range for {stream.shape[0]} rows"
                )
    if not text_selected and not image_selected:
        return text, image
    text_mean = T.mean_rows(T.take_rows(text, 1, text.shape[0]))
    image_mean = T.mean_rows(T.take_rows(image, 1, image.shape[0]))
    new_text = T.add_to_rows(text, text_selected, image_mean) if text_selected else text
    new_image = T.add_to_rows(image, image_selected, text_mean) if image_selected else image
    return new_text, new_image


def cross_forward(
    text: Tensor,
    image: Tensor,
    layers: list[LayerWeights],
    config: ExchangeConfig,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    collect_maps: bool = False,
) -> tuple[Tensor, Tensor, ExchangeTrace]:
    """Run both streams through all layers, exchanging inside the window.

    Exchange happens between the attention and feed-forward sub-layers of
    layers mu+1..eta.  The returned trace lists, per exchange layer, the
    selected stream indices and the cls attention scores they came from.
    """
    config.validate()
    if len(layers) != config.num_layers:
        raise ConfigError(
            f"got {len(layers)} layer weights for num_layers={config.num_layers}"
        )
    trace = ExchangeTrace(attention_maps=[] if collect_maps else None)
    for layer_index, weights in enumerate(layers, start=1):
        text, text_map = multi_head_attention(text, weights.attn, dropout_rate, training, rng)
        image, image_map = multi_head_attention(image, weights.attn, dropout_rate, training, rng)
        if collect_maps:
            trace.attention_maps.append((text_map, image_map))
        if config.mu < layer_index <= config.eta:
            text_scores = cls_attention_scores(text_map)
            image_scores = cls_attention_scores(image_map)
            text_selected = select_exchange_tokens(text_scores, config.theta)
            image_selected = select_exchange_tokens(image_scores, config.theta)
            text, image = exchange_update(text, image, text_selected, image_selected)
            trace.layers.append(
                ExchangeLayerTrace(
                    layer=layer_index,
                    text_selected=text_selected,
                    image_selected=image_selected,
                    text_cls_scores=[float(s) for s in text_scores],
                    image_cls_scores=[float(s) for s in image_scores],
                )
            )
        text = ffn_block(text, weights.ffn, dropout_rate, training, rng)
        image = ffn_block(image, weights.ffn, dropout_rate, training, rng)
    return text, image, trace


def fuse_outputs(text_out: Tensor, image_out: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate the two streams row-wise and project back to model width."""
    if text_out.shape[0] != image_out.shape[0]:
        raise T.ShapeError(
            f"fuse_outputs needs equal row counts, got {text_out.shape} and {image_out.shape}"
        )
    return T.add_rowvec(T.matmul(T.concat_cols(text_out, image_out), weight), bias)
