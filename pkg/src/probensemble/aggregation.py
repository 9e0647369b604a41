"""Server-side fusion of client probability contributions.

Contributions from different clients rarely cover identical samples, so
every fusion starts from an inner-join alignment on sample id. Model order
within the aligned tensor is always ascending client id; every consumer of
stacked features or simplex weights relies on that ordering contract.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .core import SampleBatch
from .errors import (
    DuplicateClientError,
    EmptyAlignmentError,
    InconsistentCError,
    OrderMismatchError,
    SingleClassError,
    TruncatedError,
    WireFormatError,
)
from .learners import SoftmaxLinearModel, ce_gradient, cross_entropy_loss
from .wire import ContributionMessage

RENORM_EPS = 1e-12


@dataclasses.dataclass(frozen=True)
class AlignedProbabilities:
    """Inner-join of contributions: probs[i, m, c] is model m's probability
    of class c on shared sample i. model_order lists client ids ascending."""

    sample_ids: np.ndarray        # (n,) uint64, strictly increasing
    probs: np.ndarray             # (n, M, C) float64
    model_order: tuple[int, ...]  # ascending client ids
    dropped: int                  # samples not shared by every model

    @property
    def n_samples(self) -> int:
        return self.probs.shape[0]

    @property
    def n_models(self) -> int:
        return self.probs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]


def align(contributions: list[ContributionMessage]) -> AlignedProbabilities:
    """Inner-join contributions on sample id, models ordered by client id.

    Samples missing from any contribution are dropped; the count of unique
    ids that failed the join is recorded on the result.
    """
    if not contributions:
        raise EmptyAlignmentError("no contributions to align")
    seen: dict[int, ContributionMessage] = {}
    for msg in contributions:
        if msg.client_id in seen:
            raise DuplicateClientError(f"two contributions from client {msg.client_id}")
        seen[msg.client_id] = msg
    n_classes = {m.probs.shape[1] for m in seen.values()}
    if len(n_classes) != 1:
        raise InconsistentCError(f"contributions disagree on class count: {sorted(n_classes)}")
    order = tuple(sorted(seen))
    id_sets = [set(int(s) for s in seen[cid].sample_ids) for cid in order]
    shared = set.intersection(*id_sets)
    union = set.union(*id_sets)
    if not shared:
        raise EmptyAlignmentError("contributions share no sample ids")
    ids = np.array(sorted(shared), dtype=np.uint64)
    layers = []
    for cid in order:
        msg = seen[cid]
        # sample_ids are strictly increasing per message, so searchsorted
        # gives each shared id's row directly
        pos = np.searchsorted(msg.sample_ids, ids)
        layers.append(msg.probs[pos])
    probs = np.stack(layers, axis=1)
    return AlignedProbabilities(sample_ids=ids, probs=probs, model_order=order,
                                dropped=len(union) - len(shared))


def _renormalize(rows: np.ndarray) -> np.ndarray:
    totals = rows.sum(axis=1, keepdims=True)
    totals = np.maximum(totals, RENORM_EPS)
    return rows / totals


def mean_fuse(aligned: AlignedProbabilities) -> np.ndarray:
    """Unweighted average over models, renormalized per sample."""
    return _renormalize(aligned.probs.mean(axis=1))


def weighted_fuse(aligned: AlignedProbabilities, weights: np.ndarray) -> np.ndarray:
    """Convex combination over models with one weight per model.

    Weights follow model_order. They are not re-checked against the simplex
    here beyond shape; optimizer projections guarantee validity upstream.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (aligned.n_models,):
        raise OrderMismatchError(
            f"got {weights.shape[0] if weights.ndim == 1 else weights.shape} weights "
            f"for {aligned.n_models} models")
    fused = np.einsum("nmc,m->nc", aligned.probs, weights)
    return _renormalize(fused)


def accuracy_weights(aligned: AlignedProbabilities, labels_by_id: dict[int, int]) -> np.ndarray:
    """Per-model validation-accuracy weights, normalized to the simplex.

    Falls back to uniform when every model scores zero.
    """
    labels = np.array([labels_by_id[int(s)] for s in aligned.sample_ids])
    scores = np.empty(aligned.n_models)
    for m in range(aligned.n_models):
        preds = np.argmax(aligned.probs[:, m, :], axis=1)
        scores[m] = float(np.mean(preds == labels))
    total = scores.sum()
    if total <= 0:
        return np.full(aligned.n_models, 1.0 / aligned.n_models)
    return scores / total


def build_features(aligned: AlignedProbabilities) -> np.ndarray:
    """Stacked feature matrix (n, M*C): model blocks concatenated in
    model_order, classes contiguous within each block."""
    n = aligned.n_samples
    return aligned.probs.reshape(n, aligned.n_models * aligned.n_classes)


_STACK_HEADER = struct.Struct("<BHH")
STACK_VERSION = 1


class StackingModel:
    """Meta-learner over concatenated member probabilities.

    Wraps a softmax linear model on M*C inputs together with the member
    order it was fitted against; predictions refuse alignments whose
    model_order differs from the fitted one.
    """

    def __init__(self, inner: SoftmaxLinearModel, model_order: tuple[int, ...]):
        if inner.n_features % len(model_order) != 0:
            raise OrderMismatchError(
                f"{inner.n_features} stacked inputs not divisible by {len(model_order)} models")
        self.inner = inner
        self.model_order = tuple(model_order)

    @property
    def n_classes(self) -> int:
        return self.inner.n_classes

    def predict_proba(self, aligned: AlignedProbabilities) -> np.ndarray:
        if aligned.model_order != self.model_order:
            raise OrderMismatchError(
                f"fitted on models {self.model_order}, asked to score {aligned.model_order}")
        features = build_features(aligned)
        batch = SampleBatch(sample_ids=aligned.sample_ids, features=features,
                            labels=np.zeros(aligned.n_samples, dtype=np.int64))
        return self.inner.predict_proba(batch)

    def to_blob(self) -> bytes:
        """Versioned little-endian snapshot: header, member ids, f32 params."""
        header = _STACK_HEADER.pack(STACK_VERSION, len(self.model_order), self.n_classes)
        ids = np.asarray(self.model_order, dtype="<u4").tobytes()
        params = self.inner.to_vector().astype("<f4").tobytes()
        return header + ids + params

    @classmethod
    def from_blob(cls, blob: bytes) -> "StackingModel":
        if len(blob) < _STACK_HEADER.size:
            raise TruncatedError(f"stacking blob of {len(blob)} bytes has no header")
        version, n_models, n_classes = _STACK_HEADER.unpack_from(blob, 0)
        if version != STACK_VERSION:
            raise WireFormatError(f"unsupported stacking blob version {version}")
        off = _STACK_HEADER.size
        need = off + 4 * n_models
        if len(blob) < need:
            raise TruncatedError("stacking blob missing member ids")
        order = tuple(int(x) for x in np.frombuffer(blob, dtype="<u4", count=n_models, offset=off))
        off = need
        n_params = n_classes * n_models * n_classes + n_classes
        need = off + 4 * n_params
        if len(blob) != need:
            raise TruncatedError(f"stacking blob is {len(blob)} bytes, expected {need}")
        vec = np.frombuffer(blob, dtype="<f4", count=n_params, offset=off).astype(np.float64)
        inner = SoftmaxLinearModel.from_vector(vec, n_classes, n_models * n_classes)
        return cls(inner, order)


def train_stacking(aligned: AlignedProbabilities, labels_by_id: dict[int, int],
                   l2_strength: float = 1.0, learning_rate: float = 0.5,
                   max_iters: int = 1000, loss_tol: float = 1e-6) -> StackingModel:
    """Fit the meta-learner by full-batch gradient descent.

    Regularization follows the inverse-strength convention: the effective
    coefficient on the mean-loss objective is 1 / (l2_strength * n), so
    larger strength means less shrinkage. Stops at max_iters or when the
    loss improves by less than loss_tol.
    """
    labels = np.array([labels_by_id[int(s)] for s in aligned.sample_ids], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise SingleClassError("stacking needs at least two classes present")
    features = build_features(aligned)
    batch = SampleBatch(sample_ids=aligned.sample_ids, features=features, labels=labels)
    n = aligned.n_samples
    l2 = 1.0 / (l2_strength * n)
    model = SoftmaxLinearModel.zeros(aligned.n_classes, features.shape[1])
    prev = cross_entropy_loss(model, batch, l2)
    for _ in range(max_iters):
        grad_w, grad_b = ce_gradient(model, batch, l2)
        model = SoftmaxLinearModel(model.weights - learning_rate * grad_w,
                                   model.bias - learning_rate * grad_b)
        loss = cross_entropy_loss(model, batch, l2)
        if abs(prev - loss) < loss_tol:
            break
        prev = loss
    return StackingModel(model, aligned.model_order)
