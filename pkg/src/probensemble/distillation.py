"""Knowledge-distillation mathematics for the probability feedback loop.

The server's fused per-sample distributions act as soft labels; trainable
clients descend the KL divergence from those targets to their own softmax
outputs over the shared reference set. Targets are constants during client
updates: gradients never flow back toward the server.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import SampleBatch
from .errors import DivergenceError, LengthMismatchError, SampleMismatchError
from .learners import SoftmaxLinearModel, ce_gradient, softmax

EPSILON = 1e-9


def _floor_rows(q: np.ndarray, epsilon: float) -> np.ndarray:
    """Raise every entry to at least epsilon, then renormalize rows.

    Keeps the log ratio finite when the local model assigns zero mass where
    the target does not.
    """
    q = np.maximum(q, epsilon)
    return q / q.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, epsilon: float = EPSILON) -> float:
    """KL(p || q) in nats with q floored at epsilon; 0 * ln(0/.) counts as 0.

    Non-negative up to float rounding; clamped at zero so equal inputs
    report exactly 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatchError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    qf = _floor_rows(q, epsilon)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(qf)), 0.0)
    return max(float(terms.sum()), 0.0)


def _rowwise_kl(p: np.ndarray, q: np.ndarray, epsilon: float) -> np.ndarray:
    qf = _floor_rows(q, epsilon)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(qf)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def kd_loss(ensemble_ids: np.ndarray, ensemble_probs: np.ndarray,
            local_ids: np.ndarray, local_probs: np.ndarray,
            epsilon: float = EPSILON) -> float:
    """Total distillation loss: sum over the reference set of per-sample
    KL(ensemble || local). Both sides must list identical sample ids in
    identical order."""
    ensemble_ids = np.asarray(ensemble_ids, dtype=np.uint64)
    local_ids = np.asarray(local_ids, dtype=np.uint64)
    if ensemble_ids.shape != local_ids.shape or not np.array_equal(ensemble_ids, local_ids):
        raise SampleMismatchError("ensemble and local cover different sample ids")
    p = np.asarray(ensemble_probs, dtype=np.float64)
    q = np.asarray(local_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatchError(f"probability shapes differ: {p.shape} vs {q.shape}")
    return float(_rowwise_kl(p, q, epsilon).sum())


def mean_divergence(target: np.ndarray, members: np.ndarray,
                    epsilon: float = EPSILON) -> float:
    """Mean KL(target || member) over an aligned member stack of shape
    (n_samples, n_members, C): the per-round distillation-gap summary."""
    target = np.asarray(target, dtype=np.float64)
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 3 or members.shape[0] != target.shape[0]:
        raise LengthMismatchError(
            f"member stack {members.shape} does not align with target {target.shape}")
    per_member = [float(_rowwise_kl(target, members[:, m, :], epsilon).mean())
                  for m in range(members.shape[1])]
    return float(np.mean(per_member))


@dataclasses.dataclass(frozen=True)
class ReferenceSet:
    """Shared samples every participant scores, so per-sample fusion is
    well-defined. Ids are unique and strictly increasing; features ride
    along for trainable clients."""

    sample_ids: np.ndarray  # (n,) uint64
    features: np.ndarray    # (n, D) float64
    version: int = 0

    def __post_init__(self):
        ids = np.asarray(self.sample_ids, dtype=np.uint64)
        feats = np.asarray(self.features, dtype=np.float64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("reference set needs at least one sample id")
        if np.any(ids[1:] <= ids[:-1]):
            raise ValueError("reference sample ids must be strictly increasing")
        if feats.ndim != 2 or feats.shape[0] != len(ids):
            raise ValueError("one feature row per reference id required")
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def as_batch(self) -> SampleBatch:
        return SampleBatch(sample_ids=self.sample_ids, features=self.features,
                           labels=np.zeros(len(self.sample_ids), dtype=np.int64))


@dataclasses.dataclass(frozen=True)
class DistillationConfig:
    kd_learning_rate: float = 0.05
    kd_steps: int = 10
    epsilon: float = EPSILON
    rounds: int = 3
    min_contributions: int = 2
    # weight on the client's own labeled cross-entropy mixed into each
    # distillation step; 0 keeps the update purely soft-label driven
    local_mix: float = 0.0
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if self.kd_learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("kd_learning_rate and epsilon must be positive")
        if self.kd_steps < 0 or self.rounds <= 0 or self.min_contributions <= 0:
            raise ValueError("kd_steps must be >= 0; rounds and min_contributions positive")
        if not 0.0 <= self.local_mix < 1.0:
            raise ValueError("local_mix must lie in [0, 1)")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")


def kd_objective(model: SoftmaxLinearModel, features: np.ndarray,
                 targets: np.ndarray, epsilon: float = EPSILON) -> float:
    """Mean per-sample KL(target || model output): the quantity each
    distillation step descends. The reported total loss is this times n."""
    probs = softmax(model.logits(features))
    return float(_rowwise_kl(np.asarray(targets, dtype=np.float64), probs, epsilon).mean())


def kd_gradient(model: SoftmaxLinearModel, features: np.ndarray,
                targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of kd_objective w.r.t. weights and bias.

    With fixed targets the KL gradient collapses to the soft-label
    cross-entropy form (softmax - target), averaged over samples.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    probs = softmax(model.logits(features))
    if probs.shape != targets.shape:
        raise LengthMismatchError(f"target shape {targets.shape} vs output {probs.shape}")
    n = features.shape[0]
    delta = probs - targets
    grad_w = delta.T @ features / n
    grad_b = delta.mean(axis=0)
    return grad_w, grad_b


def client_distill_update(model: SoftmaxLinearModel, ref: ReferenceSet,
                          targets: np.ndarray, cfg: DistillationConfig,
                          local_batch: SampleBatch | None = None,
                          ) -> tuple[SoftmaxLinearModel, tuple[float, ...]]:
    """Run cfg.kd_steps full-batch descent steps toward the soft targets.

    Returns the updated model and the objective trace (initial value plus
    one entry per step, kd_steps + 1 entries total). With local_mix > 0 and
    a labeled local batch, each step blends in that share of plain
    cross-entropy gradient on the client's own data.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(ref), model.n_classes):
        raise SampleMismatchError(
            f"targets shape {targets.shape} does not cover the reference set "
            f"({len(ref)} x {model.n_classes})")
    mix = cfg.local_mix if local_batch is not None else 0.0
    trace = [kd_objective(model, ref.features, targets, cfg.epsilon)]
    current = model
    for _ in range(cfg.kd_steps):
        grad_w, grad_b = kd_gradient(current, ref.features, targets)
        if mix > 0.0:
            ce_w, ce_b = ce_gradient(current, local_batch, l2=0.0)
            grad_w = (1.0 - mix) * grad_w + mix * ce_w
            grad_b = (1.0 - mix) * grad_b + mix * ce_b
        current = SoftmaxLinearModel(current.weights - cfg.kd_learning_rate * grad_w,
                                     current.bias - cfg.kd_learning_rate * grad_b)
        loss = kd_objective(current, ref.features, targets, cfg.epsilon)
        if not np.isfinite(loss):
            raise DivergenceError(f"distillation objective became {loss}")
        trace.append(loss)
    return current, tuple(trace)
