"""Toy encoders and the decoder pair that regularizes their embeddings.

The text encoder is an embedding table plus learned positions and one
encoder layer; the image encoder projects non-overlapping 2x2 patches of an
8x8 grid.  During training, each modality's embeddings are perturbed with
Gaussian noise and passed through a small MLP before decoding: the captioning
decoder predicts the text from the image embeddings and the generation
decoder predicts quantized grid cells from the text embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .crosstransformer import LayerWeights
from .nn import embedding_lookup, ffn_block, multi_head_attention
from .tensor import ConfigError, Tensor

__all__ = [
    "CaptionDecoderParams",
    "GRID_SIZE",
    "ImageEncoderParams",
    "ImageGenParams",
    "NUM_PATCHES",
    "NoiseConfig",
    "NoiseMlpParams",
    "PATCH_DIM",
    "PATCH_SIZE",
    "TextEncoderParams",
    "decode_image_generation",
    "decode_text_captioning",
    "encode_image",
    "encode_text",
    "image_patches",
    "inject_noise",
    "noise_draw",
    "quantize_cell",
    "validate_grid",
]

GRID_SIZE = 8
PATCH_SIZE = 2
NUM_PATCHES = (GRID_SIZE // PATCH_SIZE) ** 2  # 16
PATCH_DIM = PATCH_SIZE * PATCH_SIZE  # 4


@dataclass
class TextEncoderParams:
    embed: Tensor  # (vocab, d)
    pos: Tensor  # (max_len, d)
    layer: LayerWeights

    @property
    def max_len(self) -> int:
        return self.pos.shape[0]


@dataclass
class ImageEncoderParams:
    proj: Tensor  # (PATCH_DIM, d)
    bias: Tensor  # (d,)
    pos: Tensor  # (NUM_PATCHES, d)


@dataclass
class NoiseConfig:
    std_text: float = 1.0
    std_image: float = 1.0
    enabled: bool = True

    def validate(self) -> None:
        if self.std_text < 0 or self.std_image < 0:
            raise ConfigError(
                f"noise stds must be non-negative, got {self.std_text}/{self.std_image}"
            )


@dataclass
class NoiseMlpParams:
    w1: Tensor  # (d, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, d)
    b2: Tensor  # (d,)


@dataclass
class CaptionDecoderParams:
    embed: Tensor  # (vocab, d) decoder-side token table
    bos: Tensor  # (d,) begin-of-sequence embedding
    w1: Tensor  # (d, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, vocab)
    b2: Tensor  # (vocab,)


@dataclass
class ImageGenParams:
    w1: Tensor  # (d, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, GRID_SIZE**2 * qlevels)
    b2: Tensor  # (GRID_SIZE**2 * qlevels,)


def encode_text(
    tokens: Sequence[int],
    params: TextEncoderParams,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Token embeddings plus positions, refined by one encoder layer."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise T.ShapeError("encode_text needs at least one token")
    if len(tokens) > params.max_len:
        warnings.warn(
            f"truncating {len(tokens)} tokens to the positional limit {params.max_len}",
            stacklevel=2,
        )
        tokens = tokens[: params.max_len]
    e = T.add(
        embedding_lookup(tokens, params.embed),
        T.take_rows(params.pos, 0, len(tokens)),
    )
    e, _ = multi_head_attention(e, params.layer.attn, dropout_rate, training, rng)
    return ffn_block(e, params.layer.ffn, dropout_rate, training, rng)


def validate_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (GRID_SIZE, GRID_SIZE):
        raise T.ShapeError(f"image grid must be {GRID_SIZE}x{GRID_SIZE}, got {grid.shape}")
    if not np.all(np.isfinite(grid)) or grid.min() < 0.0 or grid.max() > 1.0:
        raise ValueError("image grid values must be finite and within [0, 1]")
    return grid


def image_patches(grid: np.ndarray) -> np.ndarray:
    """Flatten an 8x8 grid into 16 patch rows, both in row-major order."""
    grid = validate_grid(grid)
    side = GRID_SIZE // PATCH_SIZE
    patches = grid.reshape(side, PATCH_SIZE, side, PATCH_SIZE).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(patches.reshape(NUM_PATCHES, PATCH_DIM))


def encode_image(grid: np.ndarray, params: ImageEncoderParams) -> Tensor:
    """Affine-project each 2x2 patch and add its positional embedding."""
    patches = Tensor(image_patches(grid))
    projected = T.add_rowvec(T.matmul(patches, params.proj), params.bias)
    return T.add(projected, params.pos)


def noise_draw(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Fresh zero-mean Gaussian noise used by inject_noise during training."""
    if std < 0:
        raise ConfigError(f"noise std must be non-negative, got {std}")
    return rng.normal(0.0, std, size=shape)


def inject_noise(
    embeddings: Tensor,
    std: float,
    mlp: NoiseMlpParams,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """MLP over noised embeddings in training; the same MLP, no noise, otherwise."""
    if std < 0:
        raise ConfigError(f"noise std must be non-negative, got {std}")
    x = embeddings
    if training and std > 0.0:
        x = T.add_const(x, noise_draw(x.shape, std, rng))
    hidden = T.gelu(T.add_rowvec(T.matmul(x, mlp.w1), mlp.b1))
    return T.add_rowvec(T.matmul(hidden, mlp.w2), mlp.b2)


def decode_text_captioning(
    image_embeddings: Tensor,
    target_tokens: Sequence[int],
    params: CaptionDecoderParams,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced caption logits and mean cross-entropy against the targets.

    Step t sees the mean-pooled image embedding plus the embedding of target
    token t-1 (a learned begin-of-sequence vector at t=0).
    """
    targets = [int(t) for t in target_tokens]
    if not targets:
        raise T.ShapeError("decode_text_captioning needs at least one target token")
    d = params.bos.shape[0]
    bos_row = T.reshape(params.bos, (1, d))
    if len(targets) > 1:
        prev = T.concat_rows(bos_row, embedding_lookup(targets[:-1], params.embed))
    else:
        prev = bos_row
    context = T.mean_rows(image_embeddings)
    x = T.add_rowvec(prev, context)
    hidden = T.gelu(T.add_rowvec(T.matmul(x, params.w1), params.b1))
    logits = T.add_rowvec(T.matmul(hidden, params.w2), params.b2)
    return logits, T.cross_entropy_logits(logits, targets)


def quantize_cell(value: float, qlevels: int) -> int:
    """Class of a grid cell in [0, 1]: floor(v * q), with 1.0 clamped into the top bin."""
    return min(int(np.floor(value * qlevels)), qlevels - 1)


def decode_image_generation(
    text_embeddings: Tensor,
    grid: np.ndarray,
    params: ImageGenParams,
    qlevels: int = 4,
) -> tuple[Tensor, Tensor]:
    """Per-cell class logits for the quantized grid and their cross-entropy."""
    if qlevels < 2:
        raise ConfigError(f"qlevels must be at least 2, got {qlevels}")
    grid = validate_grid(grid)
    targets = [quantize_cell(v, qlevels) for v in grid.reshape(-1)]
    d = params.b1.shape[0]
    pooled = T.reshape(T.mean_rows(text_embeddings), (1, d))
    hidden = T.gelu(T.add_rowvec(T.matmul(pooled, params.w1), params.b1))
    flat = T.add_rowvec(T.matmul(hidden, params.w2), params.b2)
    logits = T.reshape(flat, (GRID_SIZE * GRID_SIZE, qlevels))
    return logits, T.cross_entropy_logits(logits, targets)
