"""Local models and synthetic data: Gaussian-cluster datasets, profile-driven
synthetic classifiers, and a softmax linear model trained by full-batch
gradient descent.

All randomness flows through ``numpy.random.default_rng`` seeded with
explicit integer sequences, so identical seeds reproduce identical datasets,
draws, and trained weights bit for bit.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import SampleBatch, normalize_to_simplex, uniform_simplex
from .errors import DimensionMismatchError, DivergenceError, ShapeMismatchError

# Seed-stream tags keep independent draw streams (dataset, per-sample noise,
# training) from colliding when built from the same scenario seed.
STREAM_DATASET = 1
STREAM_SAMPLE = 2
STREAM_TRAIN = 3


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    """Shape of a synthetic Gaussian-cluster classification problem."""

    n_classes: int
    n_features: int
    n_train: int
    n_val: int
    n_test: int
    cluster_separation: float = 3.0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_features < 1:
            raise ValueError("need at least 1 feature")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least 1 sample")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ValueError("class_weights length must equal n_classes")


def class_means(spec: DatasetSpec) -> np.ndarray:
    """Cluster centers, one per class, mutually separated by cluster_separation.

    Class c sits at (s / sqrt(2)) * e_{c mod D}, with the sign flipped once
    the axes are exhausted, which keeps every pair of distinct centers at
    Euclidean distance >= s for c < 2D.
    """
    s = spec.cluster_separation
    means = np.zeros((spec.n_classes, spec.n_features))
    for c in range(spec.n_classes):
        axis = c % spec.n_features
        sign = -1.0 if c >= spec.n_features else 1.0
        means[c, axis] = sign * s / np.sqrt(2.0)
    return means


def largest_remainder_counts(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights`.

    Floors the exact shares, then hands leftover units to the largest
    fractional remainders, ties going to the lowest class index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    shares = total * weights / weights.sum()
    counts = np.floor(shares).astype(np.int64)
    remainder = int(total - counts.sum())
    if remainder > 0:
        frac = shares - counts
        # stable sort on -frac: equal remainders keep index order
        order = np.argsort(-frac, kind="stable")
        for idx in order[:remainder]:
            counts[idx] += 1
    return counts


def _make_split(spec: DatasetSpec, n: int, rng: np.random.Generator, id_start: int) -> SampleBatch:
    weights = (np.asarray(spec.class_weights, dtype=np.float64)
               if spec.class_weights is not None
               else np.ones(spec.n_classes))
    counts = largest_remainder_counts(n, weights)
    means = class_means(spec)
    labels = np.repeat(np.arange(spec.n_classes), counts)
    features = rng.standard_normal((n, spec.n_features)) + means[labels]
    perm = rng.permutation(n)
    ids = np.arange(id_start, id_start + n, dtype=np.uint64)
    return SampleBatch(sample_ids=ids, features=features[perm], labels=labels[perm])


@dataclasses.dataclass(frozen=True)
class Dataset:
    train: SampleBatch
    val: SampleBatch
    test: SampleBatch
    spec: DatasetSpec


def generate_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Three disjoint splits with sequential, non-overlapping sample ids.

    Features are unit-covariance Gaussian clusters around the class means;
    sample ids run 0..n_train-1 (train), then continue through val and test.
    """
    rng = np.random.default_rng([seed, STREAM_DATASET])
    train = _make_split(spec, spec.n_train, rng, 0)
    val = _make_split(spec, spec.n_val, rng, spec.n_train)
    test = _make_split(spec, spec.n_test, rng, spec.n_train + spec.n_val)
    return Dataset(train=train, val=val, test=test, spec=spec)


def partition_iid(batch: SampleBatch, n_parts: int, seed: int) -> list[SampleBatch]:
    """Random equal-size-as-possible split of a batch across n_parts clients."""
    rng = np.random.default_rng([seed, STREAM_DATASET, 101])
    perm = rng.permutation(len(batch.sample_ids))
    parts = np.array_split(perm, n_parts)
    return [batch.take(np.sort(p)) for p in parts]


def partition_label_skew(batch: SampleBatch, n_parts: int, skew: float, seed: int) -> list[SampleBatch]:
    """Label-skewed split: each sample's owner is drawn from a per-class
    Dirichlet(skew) distribution over clients, so smaller skew means each
    class concentrates on fewer clients."""
    if not 0.0 < skew:
        raise ValueError("skew must be positive")
    rng = np.random.default_rng([seed, STREAM_DATASET, 102])
    n = len(batch.sample_ids)
    classes = np.unique(batch.labels)
    owner = np.zeros(n, dtype=np.int64)
    for c in classes:
        mask = batch.labels == c
        probs = rng.dirichlet(np.full(n_parts, skew))
        owner[mask] = rng.choice(n_parts, size=int(mask.sum()), p=probs)
    parts = []
    for p in range(n_parts):
        idx = np.flatnonzero(owner == p)
        parts.append(batch.take(idx))
    return parts


class SyntheticClassifier:
    """Fixed confusion-row probability source, no trainable state.

    ``profile`` is a row-stochastic (C x C) matrix: row t is the probability
    vector the model reports for a sample whose true class is t. With
    ``concentration`` set, each sample instead draws from a Dirichlet centered
    on that row (alpha = concentration * row), keyed by the sample id so the
    same sample always yields the same vector.
    """

    def __init__(self, profile: np.ndarray, concentration: float | None = None,
                 rng_seed: int | tuple[int, ...] = 0):
        profile = np.asarray(profile, dtype=np.float64)
        if profile.ndim != 2 or profile.shape[0] != profile.shape[1]:
            raise DimensionMismatchError(f"profile must be square, got {profile.shape}")
        if np.any(profile < 0):
            raise ValueError("profile rows must be non-negative")
        self.profile = np.stack([normalize_to_simplex(row) for row in profile])
        if concentration is not None and concentration <= 0:
            raise ValueError("concentration must be positive")
        self.concentration = concentration
        self.rng_seed = (rng_seed,) if isinstance(rng_seed, int) else tuple(rng_seed)

    @property
    def n_classes(self) -> int:
        return self.profile.shape[0]

    def predict_proba(self, batch: SampleBatch) -> np.ndarray:
        rows = self.profile[batch.labels]
        if self.concentration is None:
            return rows.copy()
        out = np.empty_like(rows)
        for i, sid in enumerate(batch.sample_ids):
            alpha = self.concentration * rows[i]
            rng = np.random.default_rng([*self.rng_seed, STREAM_SAMPLE, int(sid)])
            # gamma draw per coordinate; alpha=0 coordinates stay exactly 0
            draw = np.where(alpha > 0, rng.gamma(np.maximum(alpha, 1e-12)), 0.0)
            total = draw.sum()
            out[i] = draw / total if total > 0 else uniform_simplex(len(alpha))
        return out


def expert_profile(n_classes: int, expert_classes: tuple[int, ...], strength: float) -> np.ndarray:
    """Confusion profile for a model that is good on some classes only.

    Rows for expert classes put ``strength`` on the true class and spread the
    rest uniformly; rows for other classes are uniform over all classes.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must be in (0, 1]")
    for c in expert_classes:
        if not 0 <= c < n_classes:
            raise ValueError(f"expert class {c} out of range")
    profile = np.full((n_classes, n_classes), 1.0 / n_classes)
    off = (1.0 - strength) / (n_classes - 1) if n_classes > 1 else 0.0
    for c in expert_classes:
        profile[c] = off
        profile[c, c] = strength
    return profile


def restricted_expert_profile(n_classes: int, expert_classes: tuple[int, ...],
                              strength: float) -> np.ndarray:
    """Confusion profile for a model that only ever outputs its own classes.

    Models a classifier trained on a label subset: rows for expert classes
    put ``strength`` on the true class and the remainder on the other expert
    classes; rows for unseen classes spread uniformly over the expert
    classes. Mass outside the expert set is exactly zero.
    """
    if not expert_classes:
        raise ValueError("a restricted expert needs at least one expert class")
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must be in (0, 1]")
    for c in expert_classes:
        if not 0 <= c < n_classes:
            raise ValueError(f"expert class {c} out of range")
    experts = sorted(set(expert_classes))
    profile = np.zeros((n_classes, n_classes))
    inside = 1.0 / len(experts)
    for t in range(n_classes):
        if t in experts:
            if len(experts) == 1:
                profile[t, t] = 1.0
            else:
                off = (1.0 - strength) / (len(experts) - 1)
                for c in experts:
                    profile[t, c] = off
                profile[t, t] = strength
        else:
            for c in experts:
                profile[t, c] = inside
    return profile


class SoftmaxLinearModel:
    """Multinomial logistic regression: logits = X @ W.T + b.

    Immutable once constructed; training functions return new instances.
    Parameter count P = C * D + C, flattened row-major weights then bias for
    the parameter-exchange wire format.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2:
            raise DimensionMismatchError(f"weights must be 2-D, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise DimensionMismatchError(
                f"bias shape {bias.shape} does not match weights {weights.shape}")
        self.weights = weights.copy()
        self.weights.setflags(write=False)
        self.bias = bias.copy()
        self.bias.setflags(write=False)

    @classmethod
    def zeros(cls, n_classes: int, n_features: int) -> "SoftmaxLinearModel":
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_classes: int, n_features: int) -> "SoftmaxLinearModel":
        vec = np.asarray(vec, dtype=np.float64)
        expected = n_classes * n_features + n_classes
        if vec.shape != (expected,):
            raise ShapeMismatchError(f"expected {expected} parameters, got {vec.shape}")
        w = vec[: n_classes * n_features].reshape(n_classes, n_features)
        b = vec[n_classes * n_features:]
        return cls(w, b)

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"features shape {features.shape} incompatible with {self.n_features} inputs")
        return features @ self.weights.T + self.bias

    def predict_proba(self, batch: SampleBatch) -> np.ndarray:
        return softmax(self.logits(batch.features))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(model: SoftmaxLinearModel, batch: SampleBatch, l2: float) -> float:
    """Mean cross-entropy plus (l2/2) * ||theta||^2 over weights and bias."""
    probs = model.predict_proba(batch)
    n = len(batch.labels)
    nll = -np.log(np.maximum(probs[np.arange(n), batch.labels], 1e-300)).mean()
    penalty = 0.5 * l2 * (np.sum(model.weights ** 2) + np.sum(model.bias ** 2))
    return float(nll + penalty)


def ce_gradient(model: SoftmaxLinearModel, batch: SampleBatch, l2: float) -> tuple[np.ndarray, np.ndarray]:
    probs = model.predict_proba(batch)
    n = len(batch.labels)
    delta = probs.copy()
    delta[np.arange(n), batch.labels] -= 1.0
    grad_w = delta.T @ batch.features / n + l2 * model.weights
    grad_b = delta.mean(axis=0) + l2 * model.bias
    return grad_w, grad_b


def train_local(model: SoftmaxLinearModel, batch: SampleBatch, epochs: int,
                learning_rate: float, l2: float = 0.0) -> SoftmaxLinearModel:
    """Full-batch gradient descent on regularized mean cross-entropy.

    Returns a fresh model; raises DivergenceError if the loss goes non-finite.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    w = model.weights.copy()
    b = model.bias.copy()
    current = SoftmaxLinearModel(w, b)
    for _ in range(epochs):
        grad_w, grad_b = ce_gradient(current, batch, l2)
        w = current.weights - learning_rate * grad_w
        b = current.bias - learning_rate * grad_b
        current = SoftmaxLinearModel(w, b)
        loss = cross_entropy_loss(current, batch, l2)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became {loss}")
    return current


def fedavg_aggregate(vectors: list[np.ndarray], weights: list[int]) -> np.ndarray:
    """Sample-count-weighted average of flattened parameter vectors."""
    if not vectors:
        raise ValueError("nothing to aggregate")
    if len(vectors) != len(weights):
        raise ShapeMismatchError("one weight per parameter vector required")
    shape = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != shape:
            raise ShapeMismatchError(f"parameter shapes differ: {v.shape} vs {shape}")
    totals = np.asarray(weights, dtype=np.float64)
    if totals.sum() <= 0:
        raise ValueError("total weight must be positive")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    return (totals[:, None] * stacked).sum(axis=0) / totals.sum()
