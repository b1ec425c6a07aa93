"""Task heads: a linear-chain CRF for tagging and an affine sentiment classifier.

The CRF loss is log Z minus the gold path score, with the partition function
computed by the forward algorithm in log space.  Viterbi decoding breaks
score ties toward the lower label id at every backtrack step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import dropout_mask
from .tensor import ConfigError, Tensor

__all__ = [
    "ClassifierParams",
    "CrfParams",
    "LabelScheme",
    "classify_sentiment",
    "crf_log_likelihood",
    "crf_viterbi_decode",
]


@dataclass
class LabelScheme:
    """BIO label inventory: 'O' plus B-/I- pairs per entity type."""

    labels: list[str]
    types: list[str] = field(init=False)

    def __post_init__(self) -> None:
        if not self.labels or self.labels[0] != "O":
            raise ConfigError("label scheme must start with 'O'")
        types = []
        for name in self.labels[1:]:
            if not (name.startswith("B-") or name.startswith("I-")):
                raise ConfigError(f"label {name!r} is neither 'O' nor B-/I- prefixed")
            if name.startswith("B-"):
                types.append(name[2:])
        for name in self.labels:
            if name.startswith("I-") and f"B-{name[2:]}" not in self.labels:
                raise ConfigError(f"label {name!r} has no matching B- label")
        self.types = types

    @property
    def size(self) -> int:
        return len(self.labels)

    def id_of(self, name: str) -> int:
        return self.labels.index(name)

    def entity_type(self, label_id: int) -> str | None:
        name = self.labels[label_id]
        return name[2:] if name != "O" else None

    def is_begin(self, label_id: int) -> bool:
        return self.labels[label_id].startswith("B-")


@dataclass
class CrfParams:
    transitions: Tensor  # (L, L): score of moving from label i to label j
    start: Tensor  # (L,)
    end: Tensor  # (L,)

    def __post_init__(self) -> None:
        n = self.transitions.shape[0]
        if self.transitions.shape != (n, n) or self.start.shape != (n,) or self.end.shape != (n,):
            raise T.ShapeError(
                f"inconsistent CRF shapes: transitions {self.transitions.shape}, "
                f"start {self.start.shape}, end {self.end.shape}"
            )

    @property
    def num_labels(self) -> int:
        return self.transitions.shape[0]


def _check_labels(labels: Sequence[int], num_labels: int, n: int) -> list[int]:
    labels = [int(y) for y in labels]
    if len(labels) != n:
        raise T.ShapeError(f"got {len(labels)} labels for {n} emission rows")
    for y in labels:
        if not 0 <= y < num_labels:
            raise IndexError(f"label id {y} out of range for {num_labels} labels")
    return labels


def crf_log_likelihood(emissions: Tensor, labels: Sequence[int], crf: CrfParams) -> Tensor:
    """Negative log-likelihood of the gold path: log Z - score(gold)."""
    if emissions.data.ndim != 2 or emissions.shape[1] != crf.num_labels:
        raise T.ShapeError(
            f"emissions {emissions.shape} do not match {crf.num_labels} labels"
        )
    n, num_labels = emissions.shape
    if n == 0:
        raise T.ShapeError("crf_log_likelihood needs at least one emission row")
    labels = _check_labels(labels, num_labels, n)

    gold = T.sum_all(T.gather_rows_cols(emissions, list(range(n)), labels))
    gold = T.add(gold, T.sum_all(T.gather_1d(crf.start, [labels[0]])))
    gold = T.add(gold, T.sum_all(T.gather_1d(crf.end, [labels[-1]])))
    if n > 1:
        gold = T.add(gold, T.sum_all(T.gather_rows_cols(crf.transitions, labels[:-1], labels[1:])))

    alpha = T.add(T.reshape(crf.start, (1, num_labels)), T.take_rows(emissions, 0, 1))
    for t in range(1, n):
        scores = T.add_colvec(crf.transitions, T.reshape(alpha, (num_labels,)))
        alpha = T.add(T.logsumexp_axis0(scores), T.take_rows(emissions, t, t + 1))
    log_z = T.logsumexp_all(T.add(alpha, T.reshape(crf.end, (1, num_labels))))
    return T.sub(log_z, gold)


def crf_viterbi_decode(emissions: Tensor, crf: CrfParams) -> list[int]:
    """Highest-scoring label path; ties resolve to the lower label id."""
    if emissions.data.ndim != 2 or emissions.shape[1] != crf.num_labels:
        raise T.ShapeError(
            f"emissions {emissions.shape} do not match {crf.num_labels} labels"
        )
    n = emissions.shape[0]
    if n == 0:
        raise T.ShapeError("crf_viterbi_decode needs at least one emission row")
    e = emissions.data
    trans = crf.transitions.data
    delta = crf.start.data + e[0]
    backptr = np.zeros((n, crf.num_labels), dtype=np.intp)
    for t in range(1, n):
        candidates = delta[:, None] + trans
        backptr[t] = candidates.argmax(axis=0)  # argmax takes the lowest id on ties
        delta = candidates[backptr[t], np.arange(crf.num_labels)] + e[t]
    delta = delta + crf.end.data
    path = [int(delta.argmax())]
    for t in range(n - 1, 0, -1):
        path.append(int(backptr[t][path[-1]]))
    path.reverse()
    return path


@dataclass
class ClassifierParams:
    weight: Tensor  # (d, classes)
    bias: Tensor  # (classes,)


def classify_sentiment(
    fused: Tensor,
    params: ClassifierParams,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Class logits from the fused cls row (row 0) after dropout."""
    if fused.data.ndim != 2 or fused.shape[1] != params.weight.shape[0]:
        raise T.ShapeError(
            f"fused embedding {fused.shape} does not match classifier {params.weight.shape}"
        )
    cls_row = T.take_rows(fused, 0, 1)
    cls_row = dropout_mask(cls_row, dropout_rate, training, rng)
    return T.add_rowvec(T.matmul(cls_row, params.weight), params.bias)
