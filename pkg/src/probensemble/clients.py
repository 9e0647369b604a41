"""Client-side participants of the simulated fleet.

Two kinds exist. Synthetic clients are probability sources defined by a
confusion profile; they need the true label of a sample to look up their
profile row, which the simulation grants them as part of their definition.
Trainable clients own a softmax linear model plus a private labeled shard
and respond to ensemble broadcasts by distilling toward the soft targets.
"""

from __future__ import annotations

import logging

import numpy as np

from .core import SampleBatch
from .distillation import DistillationConfig, ReferenceSet, client_distill_update
from .errors import NotEligibleError
from .learners import SoftmaxLinearModel, SyntheticClassifier, train_local
from .wire import ContributionMessage

log = logging.getLogger(__name__)


class SyntheticClient:
    """Fixed probability source; ignores distillation feedback."""

    trainable = False

    def __init__(self, client_id: int, classifier: SyntheticClassifier,
                 labels_by_id: dict[int, int]):
        if client_id <= 0:
            raise ValueError("client ids must be positive (0 is the server)")
        self.client_id = client_id
        self.classifier = classifier
        self.labels_by_id = dict(labels_by_id)

    def _labeled(self, sample_ids: np.ndarray, features: np.ndarray) -> SampleBatch:
        labels = np.array([self.labels_by_id[int(s)] for s in sample_ids], dtype=np.int64)
        return SampleBatch(sample_ids=sample_ids, features=features, labels=labels)

    def contribution(self, ref: ReferenceSet, round_: int) -> ContributionMessage:
        batch = self._labeled(ref.sample_ids, ref.features)
        probs = self.classifier.predict_proba(batch)
        return ContributionMessage(client_id=self.client_id, round=round_,
                                   sample_ids=ref.sample_ids, probs=probs)

    def predict_proba(self, batch: SampleBatch) -> np.ndarray:
        return self.classifier.predict_proba(batch)

    def absorb_broadcast(self, ref: ReferenceSet, targets: np.ndarray,
                         cfg: DistillationConfig) -> tuple[float, ...]:
        log.debug("client %d is synthetic, ignoring distillation broadcast", self.client_id)
        return ()


class TrainableClient:
    """Softmax linear model over a private shard, refined by distillation."""

    trainable = True

    def __init__(self, client_id: int, model: SoftmaxLinearModel, train_batch: SampleBatch,
                 epochs: int = 50, learning_rate: float = 0.1, l2: float = 0.0,
                 epochs_per_round: int = 0):
        if client_id <= 0:
            raise ValueError("client ids must be positive (0 is the server)")
        if len(train_batch.labels) == 0:
            raise NotEligibleError(f"client {client_id} has an empty training shard")
        self.client_id = client_id
        self.model = model
        self.train_batch = train_batch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.epochs_per_round = epochs_per_round
        self.kd_traces: list[tuple[float, ...]] = []

    def fit_local(self) -> None:
        """Initial supervised training on the private shard."""
        self.model = train_local(self.model, self.train_batch, self.epochs,
                                 self.learning_rate, self.l2)

    def refresh_local(self) -> None:
        """Optional extra supervised epochs between rounds (default none)."""
        if self.epochs_per_round > 0:
            self.model = train_local(self.model, self.train_batch, self.epochs_per_round,
                                     self.learning_rate, self.l2)

    def contribution(self, ref: ReferenceSet, round_: int) -> ContributionMessage:
        probs = self.model.predict_proba(ref.as_batch())
        return ContributionMessage(client_id=self.client_id, round=round_,
                                   sample_ids=ref.sample_ids, probs=probs)

    def predict_proba(self, batch: SampleBatch) -> np.ndarray:
        return self.model.predict_proba(batch)

    def absorb_broadcast(self, ref: ReferenceSet, targets: np.ndarray,
                         cfg: DistillationConfig) -> tuple[float, ...]:
        self.model, trace = client_distill_update(self.model, ref, targets, cfg,
                                                  local_batch=self.train_batch)
        self.kd_traces.append(trace)
        return trace


Client = SyntheticClient | TrainableClient
