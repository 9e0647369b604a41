"""Domain types, simplex arithmetic and classification metrics.

Probability vectors and combination-weight vectors are plain float64 numpy
arrays; the functions here define what "valid" means for them (the simplex
invariant) and provide the handful of metrics every other module shares.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import AllZeroError, EmptyMatrixError, LengthMismatchError

SIMPLEX_TOL = 1e-6


def validate_simplex(v: Sequence[float] | np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    """True iff all entries are non-negative and the sum is 1 within tol.

    Pure predicate: never raises on bad values, only on an empty input.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty vector")
    if np.any(arr < 0.0):
        return False
    return bool(abs(float(arr.sum()) - 1.0) <= tol)


def normalize_to_simplex(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scale a non-negative vector so it sums to exactly 1.

    Proportions are preserved. Raises ``AllZeroError`` when every entry is
    zero; callers that want the uniform fallback substitute it themselves
    (and log it) so the substitution is never silent.
    """
    arr = np.asarray(v, dtype=np.float64)
    total = float(arr.sum())
    if total <= 0.0:
        raise AllZeroError("cannot normalize an all-zero vector")
    return arr / total


def uniform_simplex(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n, dtype=np.float64)


def argmax_class(p: Sequence[float] | np.ndarray) -> int:
    """Index of the largest entry; ties break to the lowest index."""
    return int(np.argmax(np.asarray(p, dtype=np.float64)))


def accuracy(preds: Sequence[int] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Fraction of positions where preds equals labels."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise LengthMismatchError(f"preds length {p.shape} != labels length {y.shape}")
    if p.size == 0:
        raise LengthMismatchError("empty prediction sequence")
    return float(np.mean(p == y))


@dataclass(frozen=True)
class LabeledSample:
    """One sample: a unique 64-bit id, a feature row and a class index."""

    sample_id: int
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class SampleBatch:
    """Columnar batch of labeled samples (ids ascending, unique)."""

    sample_ids: np.ndarray   # uint64, shape (n,)
    features: np.ndarray     # float64, shape (n, D)
    labels: np.ndarray       # int64, shape (n,)

    def __post_init__(self):
        n = len(self.sample_ids)
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise LengthMismatchError("batch columns have different lengths")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def samples(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield LabeledSample(int(self.sample_ids[i]), self.features[i], int(self.labels[i]))

    def label_lookup(self) -> dict[int, int]:
        return {int(s): int(l) for s, l in zip(self.sample_ids, self.labels)}

    def take(self, index: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.sample_ids[index], self.features[index], self.labels[index])


class ConfusionMatrix:
    """C x C count grid; row = true class, column = predicted class."""

    def __init__(self, counts: np.ndarray | Sequence[Sequence[int]]):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(counts < 0):
            raise ValueError("confusion matrix entries must be non-negative")
        self.counts = counts

    @classmethod
    def from_predictions(cls, preds, labels, n_classes: int) -> "ConfusionMatrix":
        preds = np.asarray(preds, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if preds.shape != labels.shape:
            raise LengthMismatchError("preds and labels differ in length")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (labels, preds), 1)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_f1(self) -> np.ndarray:
        """F1 per class; defined as 0 where precision + recall is 0."""
        tp = np.diag(self.counts).astype(np.float64)
        predicted = self.counts.sum(axis=0).astype(np.float64)
        actual = self.counts.sum(axis=1).astype(np.float64)
        precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
        denom = precision + recall
        f1 = np.divide(2.0 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
        return f1

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1 scores."""
    if cm.total == 0:
        raise EmptyMatrixError("macro F1 of an empty confusion matrix")
    return float(cm.per_class_f1().mean())


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1.

    The weighting convention (per-class F1 weighted by true-class support)
    is stated here explicitly because "weighted F1" is reported ambiguously
    in much of the literature.
    """
    if cm.total == 0:
        raise EmptyMatrixError("weighted F1 of an empty confusion matrix")
    support = cm.support().astype(np.float64)
    return float(np.sum(cm.per_class_f1() * support) / support.sum())
