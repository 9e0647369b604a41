"""Server-side orchestration of the simulated fleet.

Runs the probability feedback loop round by round: collect contributions
under a minimum-count threshold (never blocking on absent clients), fuse
with the chosen strategy, broadcast the ensemble distribution, and let
trainable clients distill. Also runs the parameter-averaging comparator
over the same transport so byte ledgers are directly comparable.

Fusion weights and the stacking meta-model are fit once per run, on the
validation split, and frozen; rounds only move the clients.
"""

from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np

from .aggregation import accuracy_weights, align, mean_fuse, train_stacking, weighted_fuse
from .broker import Broker, ByteLedger, Subscription, contrib_topic, ensemble_topic, params_topic
from .clients import Client, TrainableClient
from .core import ConfusionMatrix, SampleBatch, macro_f1
from .distillation import DistillationConfig, ReferenceSet, mean_divergence
from .errors import (
    FutureRoundError,
    InsufficientContributionsError,
    NotEligibleError,
    OrderMismatchError,
    SampleMismatchError,
    ScenarioMismatchError,
    ShapeMismatchError,
)
from .learners import SoftmaxLinearModel, fedavg_aggregate, train_local
from .optimizers import (
    FitnessContext,
    GaConfig,
    PsoConfig,
    ga_optimize,
    project_to_simplex,
    pso_optimize,
)
from .reporting import ComparisonRow, RoundRecord, RunReport
from .wire import SERVER_ID, ContributionMessage, EnsembleBroadcast, ParameterMessage

log = logging.getLogger(__name__)

STREAM_ORDER = 21

STRATEGY_KINDS = ("mean", "weighted", "stacking", "ga", "pso", "fedavg")
# strategies that fuse with a frozen per-model weight vector
_WEIGHT_KINDS = ("weighted", "ga", "pso")


@dataclasses.dataclass(frozen=True)
class StrategyChoice:
    kind: str
    ga: GaConfig = GaConfig()
    pso: PsoConfig = PsoConfig()

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}, "
                             f"expected one of {STRATEGY_KINDS}")


class RoundState:
    """Contribution inbox for one round: latest message per client wins,
    stale traffic is counted and dropped, status only moves forward."""

    _ORDER = ("collecting", "aggregated", "abandoned")

    def __init__(self, round_: int, min_contributions: int):
        if min_contributions < 1:
            raise ValueError("min_contributions must be positive")
        self.round = round_
        self.min_contributions = min_contributions
        self.received: dict[int, ContributionMessage] = {}
        self.stale = 0
        self.status = "collecting"

    @property
    def eligible(self) -> bool:
        return len(self.received) >= self.min_contributions

    def _advance(self, status: str) -> None:
        if self._ORDER.index(status) < self._ORDER.index(self.status):
            raise NotEligibleError(f"cannot move status {self.status} back to {status}")
        self.status = status

    def mark_aggregated(self) -> None:
        self._advance("aggregated")

    def mark_abandoned(self) -> None:
        self._advance("abandoned")


def collect(state: RoundState, msg: ContributionMessage) -> RoundState:
    """File a contribution into the round: future rounds are protocol
    violations, past rounds are counted as stale and dropped, duplicates
    replace the stored payload."""
    if msg.round > state.round:
        raise FutureRoundError(f"message for round {msg.round} during round {state.round}")
    if msg.round < state.round:
        state.stale += 1
        return state
    state.received[msg.client_id] = msg
    return state


class FittedStrategy:
    """A fusion rule frozen for the run.

    Weight-based kinds keep a simplex weight vector over the fitted member
    order; when members are missing at fuse time (dropouts), the surviving
    weights are renormalized. Stacking refuses altered member sets because
    its feature layout is positional.
    """

    def __init__(self, kind, weights=None, model_order=None, stacker=None,
                 trace=(), fitness=None):
        self.kind = kind
        self.weights = None if weights is None else np.asarray(weights, dtype=np.float64)
        self.model_order = None if model_order is None else tuple(model_order)
        self.stacker = stacker
        self.trace = tuple(trace)
        self.fitness = fitness

    def fuse(self, aligned) -> np.ndarray:
        if self.kind == "mean":
            return mean_fuse(aligned)
        if self.kind == "stacking":
            return self.stacker.predict_proba(aligned)
        if aligned.model_order == self.model_order:
            return weighted_fuse(aligned, self.weights)
        unknown = [cid for cid in aligned.model_order if cid not in self.model_order]
        if unknown:
            raise OrderMismatchError(f"members {unknown} were not present at fit time")
        idx = [self.model_order.index(cid) for cid in aligned.model_order]
        surviving = project_to_simplex(self.weights[idx])
        log.info("fusing with %d of %d fitted members, weights renormalized",
                 len(idx), len(self.model_order))
        return weighted_fuse(aligned, surviving)


def fit_strategy(choice: StrategyChoice, aligned, labels_by_id: dict[int, int]) -> FittedStrategy:
    """Fit the chosen fusion rule on the validation alignment."""
    kind = choice.kind
    if kind == "mean":
        return FittedStrategy("mean")
    if kind == "weighted":
        w = accuracy_weights(aligned, labels_by_id)
        return FittedStrategy("weighted", weights=w, model_order=aligned.model_order)
    if kind in ("ga", "pso"):
        ctx = FitnessContext(aligned, labels_by_id)
        result = ga_optimize(ctx, choice.ga) if kind == "ga" else pso_optimize(ctx, choice.pso)
        return FittedStrategy(kind, weights=result.weights, model_order=aligned.model_order,
                              trace=result.trace, fitness=result.fitness)
    if kind == "stacking":
        stacker = train_stacking(aligned, labels_by_id)
        return FittedStrategy("stacking", stacker=stacker, model_order=aligned.model_order)
    raise ValueError(f"strategy {kind!r} has no probability-fusion rule")


def aggregate_round(state: RoundState, fitted: FittedStrategy,
                    ) -> tuple[EnsembleBroadcast, dict]:
    """Align the round's contributions, fuse, and build the broadcast.

    Returns the broadcast plus round metrics (contributor count, stale
    count, join-dropped samples, and the mean divergence from the fused
    distribution to each contribution).
    """
    if not state.eligible:
        raise NotEligibleError(
            f"round {state.round} has {len(state.received)} contributions, "
            f"needs {state.min_contributions}")
    aligned = align(list(state.received.values()))
    fused = fitted.fuse(aligned)
    state.mark_aggregated()
    broadcast = EnsembleBroadcast(round=state.round, sample_ids=aligned.sample_ids,
                                  probs=fused)
    metrics = {
        "contributors": len(state.received),
        "stale": state.stale,
        "join_dropped": aligned.dropped,
        "mean_kd": mean_divergence(fused, aligned.probs),
    }
    return broadcast, metrics


# --- transport wiring --------------------------------------------------------


@dataclasses.dataclass
class Endpoints:
    """Where the server and each client publish and subscribe.

    With drain_budget None the loop assumes synchronous delivery and drains
    until the queue is quiescent; with a budget it polls the clock instead.
    """

    server: object
    for_client: dict[int, object]
    ledger: ByteLedger
    drain_budget: float | None = None
    closer: object = None

    def close(self) -> None:
        if self.closer is not None:
            self.closer()


def inproc_endpoints(clients: list[Client]) -> Endpoints:
    broker = Broker()
    return Endpoints(server=broker,
                     for_client={c.client_id: broker for c in clients},
                     ledger=broker.ledger,
                     drain_budget=None)


def tcp_endpoints(clients: list[Client], wait_budget: float = 5.0) -> Endpoints:
    from .broker import TcpBrokerServer, TcpClient

    server = TcpBrokerServer()
    conns = {c.client_id: TcpClient(server.host, server.port) for c in clients}

    def close():
        for conn in conns.values():
            conn.close()
        server.shutdown()

    return Endpoints(server=server, for_client=conns, ledger=server.broker.ledger,
                     drain_budget=wait_budget, closer=close)


def _drain_contributions(sub: Subscription, state: RoundState, expected: int,
                         budget: float | None) -> None:
    if budget is not None:
        deadline = time.monotonic() + budget
        while len(state.received) < expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            msg = sub.poll(min(remaining, 0.05))
            if isinstance(msg, ContributionMessage):
                collect(state, msg)
    while True:
        msg = sub.poll(0.0)
        if msg is None:
            return
        if isinstance(msg, ContributionMessage):
            collect(state, msg)


# --- the probability feedback loop -------------------------------------------


@dataclasses.dataclass
class LoopResult:
    records: list[RoundRecord]
    traces: list[tuple[str, int, int, float]]
    fitted: FittedStrategy
    ledger: ByteLedger


def _direct_contributions(clients: list[Client], batch: SampleBatch,
                          round_: int) -> list[ContributionMessage]:
    """Out-of-band probability queries for fitting and evaluation.

    These never touch the transport or the byte ledger: they stand in for
    the server evaluating member models on data it already holds.
    """
    return [ContributionMessage(client_id=c.client_id, round=round_,
                                sample_ids=batch.sample_ids,
                                probs=c.predict_proba(batch))
            for c in clients]


def _test_metrics(fitted: FittedStrategy, contributors: list[Client],
                  test_batch: SampleBatch, n_classes: int) -> tuple[float, float]:
    aligned = align(_direct_contributions(contributors, test_batch, 0))
    fused = fitted.fuse(aligned)
    preds = np.argmax(fused, axis=1)
    cm = ConfusionMatrix.from_predictions(preds, test_batch.labels, n_classes)
    acc = float(np.mean(preds == test_batch.labels))
    return acc, macro_f1(cm)


def _client_accuracy(client: Client, test_batch: SampleBatch) -> float:
    preds = np.argmax(client.predict_proba(test_batch), axis=1)
    return float(np.mean(preds == test_batch.labels))


def run_feedback_loop(clients: list[Client], choice: StrategyChoice, ref: ReferenceSet,
                      cfg: DistillationConfig, val_batch: SampleBatch,
                      test_batch: SampleBatch, seed: int,
                      endpoints: Endpoints | None = None,
                      drop_at_round: dict[int, int] | None = None) -> LoopResult:
    """Run the full probability-exchange protocol.

    Setup: trainable clients fit on their private shards, then the fusion
    strategy is fit on the validation alignment and frozen. Each round,
    alive clients publish contributions over the reference set in a seeded
    random order, the server aggregates whatever arrived (requiring only
    min_contributions), broadcasts the fused per-sample distributions, and
    alive trainable clients take distillation steps toward them. Stops
    after cfg.rounds rounds or once the mean divergence moves less than
    cfg.convergence_tol between rounds.
    """
    if choice.kind == "fedavg":
        raise ValueError("the parameter-averaging baseline has its own runner")
    drop_at_round = dict(drop_at_round or {})
    own_endpoints = endpoints is None
    if own_endpoints:
        endpoints = inproc_endpoints(clients)
    try:
        for c in clients:
            if c.trainable:
                c.fit_local()

        val_labels = val_batch.label_lookup()
        aligned_val = align(_direct_contributions(clients, val_batch, 0))
        n_classes = aligned_val.n_classes
        fitted = fit_strategy(choice, aligned_val, val_labels)
        traces: list[tuple[str, int, int, float]] = []
        for step, best, mean in fitted.trace:
            traces.append(("optimizer_best", 0, step, best))
            traces.append(("optimizer_mean", 0, step, mean))

        records: list[RoundRecord] = []
        alive = {c.client_id for c in clients}
        by_id = {c.client_id: c for c in clients}
        prev_kd = None
        for round_ in range(1, cfg.rounds + 1):
            for cid, at in drop_at_round.items():
                if round_ >= at:
                    alive.discard(cid)
            if round_ > 1:
                for cid in sorted(alive):
                    if by_id[cid].trainable:
                        by_id[cid].refresh_local()

            contrib_sub = endpoints.server.subscribe(contrib_topic(round_))
            bcast_subs = {cid: endpoints.for_client[cid].subscribe(ensemble_topic(round_))
                          for cid in sorted(alive)}

            order = np.random.default_rng([seed, STREAM_ORDER, round_]).permutation(len(clients))
            for idx in order:
                client = clients[int(idx)]
                if client.client_id not in alive:
                    continue
                msg = client.contribution(ref, round_)
                endpoints.for_client[client.client_id].publish(contrib_topic(round_), msg)

            state = RoundState(round_, cfg.min_contributions)
            _drain_contributions(contrib_sub, state, len(alive), endpoints.drain_budget)
            if not state.eligible:
                state.mark_abandoned()
                raise InsufficientContributionsError(
                    f"round {round_}: {len(state.received)} contributions, "
                    f"needs {cfg.min_contributions}")
            broadcast, metrics = aggregate_round(state, fitted)
            endpoints.server.publish(ensemble_topic(round_), broadcast)

            for cid in sorted(bcast_subs):
                msg = bcast_subs[cid].poll(endpoints.drain_budget or 0.0)
                if msg is None:
                    log.warning("client %d missed the round %d broadcast", cid, round_)
                    continue
                pos = np.searchsorted(ref.sample_ids, msg.sample_ids)
                if (np.any(pos >= len(ref.sample_ids))
                        or not np.array_equal(ref.sample_ids[pos], msg.sample_ids)):
                    raise SampleMismatchError(
                        f"round {round_} broadcast covers ids outside the reference set")
                sub_ref = ReferenceSet(sample_ids=msg.sample_ids,
                                       features=ref.features[pos], version=round_)
                kd_trace = by_id[cid].absorb_broadcast(sub_ref, msg.probs, cfg)
                for step, value in enumerate(kd_trace):
                    traces.append((f"kd_client_{cid}", round_, step, value))

            contributors = [by_id[cid] for cid in sorted(state.received)]
            ens_acc, ens_f1 = _test_metrics(fitted, contributors, test_batch, n_classes)
            client_acc = {cid: _client_accuracy(by_id[cid], test_batch)
                          for cid in sorted(alive)}
            records.append(RoundRecord(
                round=round_, strategy=choice.kind,
                ensemble_accuracy=ens_acc, ensemble_macro_f1=ens_f1,
                client_accuracy=client_acc, mean_kd=metrics["mean_kd"],
                contributors=metrics["contributors"], stale=metrics["stale"],
                bytes_by_kind=endpoints.ledger.snapshot()))

            kd = metrics["mean_kd"]
            if prev_kd is not None and abs(kd - prev_kd) < cfg.convergence_tol:
                log.info("mean divergence settled at round %d, stopping early", round_)
                break
            prev_kd = kd
        return LoopResult(records=records, traces=traces, fitted=fitted,
                          ledger=endpoints.ledger)
    finally:
        if own_endpoints:
            endpoints.close()


# --- parameter-averaging comparator ------------------------------------------


def run_fedavg_baseline(clients: list[TrainableClient], rounds: int,
                        cfg: DistillationConfig, test_batch: SampleBatch, seed: int,
                        endpoints: Endpoints | None = None,
                        drop_at_round: dict[int, int] | None = None) -> LoopResult:
    """Classic parameter averaging over the same transport.

    Every round each alive client trains its configured epoch budget on its
    private shard, uploads its full f32 parameter vector, and receives the
    sample-weighted average back under the server's sender id. The report
    mirrors the feedback loop (the ensemble column holds the global model's
    test quality; the divergence column stays empty).
    """
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    for c in clients:
        if not c.trainable:
            raise ShapeMismatchError("parameter averaging needs trainable clients only")
    shapes = {(c.model.n_classes, c.model.n_features) for c in clients}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"client model shapes differ: {sorted(shapes)}")
    (n_classes, n_features), = shapes

    drop_at_round = dict(drop_at_round or {})
    own_endpoints = endpoints is None
    if own_endpoints:
        endpoints = inproc_endpoints(clients)
    try:
        records: list[RoundRecord] = []
        alive = {c.client_id for c in clients}
        by_id = {c.client_id: c for c in clients}
        for round_ in range(1, rounds + 1):
            for cid, at in drop_at_round.items():
                if round_ >= at:
                    alive.discard(cid)
            param_sub = endpoints.server.subscribe(params_topic(round_))
            client_subs = {cid: endpoints.for_client[cid].subscribe(params_topic(round_))
                           for cid in sorted(alive)}

            order = np.random.default_rng([seed, STREAM_ORDER, round_]).permutation(len(clients))
            for idx in order:
                client = clients[int(idx)]
                if client.client_id not in alive:
                    continue
                client.model = train_local(client.model, client.train_batch,
                                           client.epochs, client.learning_rate, client.l2)
                msg = ParameterMessage(client_id=client.client_id, round=round_,
                                       params=client.model.to_vector())
                endpoints.for_client[client.client_id].publish(params_topic(round_), msg)

            received: dict[int, ParameterMessage] = {}
            deadline = (time.monotonic() + endpoints.drain_budget
                        if endpoints.drain_budget is not None else None)
            while True:
                if deadline is not None and len(received) < len(alive):
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    msg = param_sub.poll(min(remaining, 0.05))
                else:
                    msg = param_sub.poll(0.0)
                if msg is None:
                    if deadline is None or len(received) >= len(alive):
                        break
                    continue
                if isinstance(msg, ParameterMessage) and msg.client_id != SERVER_ID:
                    if msg.round == round_:
                        received[msg.client_id] = msg
            if len(received) < cfg.min_contributions:
                raise InsufficientContributionsError(
                    f"round {round_}: {len(received)} parameter uploads, "
                    f"needs {cfg.min_contributions}")

            order_ids = sorted(received)
            vectors = [received[cid].params for cid in order_ids]
            weights = [len(by_id[cid].train_batch.labels) for cid in order_ids]
            global_vec = fedavg_aggregate(vectors, weights)
            down = ParameterMessage(client_id=SERVER_ID, round=round_, params=global_vec)
            endpoints.server.publish(params_topic(round_), down)

            for cid in sorted(client_subs):
                update = None
                budget = endpoints.drain_budget
                deadline = time.monotonic() + budget if budget is not None else None
                while True:
                    timeout = 0.0
                    if deadline is not None:
                        remaining = deadline - time.monotonic()
                        if remaining <= 0:
                            break
                        timeout = min(remaining, 0.05)
                    msg = client_subs[cid].poll(timeout)
                    if msg is None:
                        if deadline is None:
                            break
                        continue
                    if isinstance(msg, ParameterMessage) and msg.client_id == SERVER_ID:
                        update = msg
                        break
                if update is None:
                    log.warning("client %d missed the round %d parameter broadcast", cid, round_)
                    continue
                if update.params.shape[0] != n_classes * n_features + n_classes:
                    raise ShapeMismatchError(
                        f"global parameter vector has {update.params.shape[0]} entries")
                by_id[cid].model = SoftmaxLinearModel.from_vector(
                    update.params, n_classes, n_features)

            global_model = SoftmaxLinearModel.from_vector(global_vec, n_classes, n_features)
            preds = np.argmax(global_model.predict_proba(test_batch), axis=1)
            cm = ConfusionMatrix.from_predictions(preds, test_batch.labels, n_classes)
            records.append(RoundRecord(
                round=round_, strategy="fedavg",
                ensemble_accuracy=float(np.mean(preds == test_batch.labels)),
                ensemble_macro_f1=macro_f1(cm),
                client_accuracy={cid: _client_accuracy(by_id[cid], test_batch)
                                 for cid in sorted(alive)},
                mean_kd=None, contributors=len(received), stale=0,
                bytes_by_kind=endpoints.ledger.snapshot()))
        return LoopResult(records=records, traces=[], fitted=FittedStrategy("mean"),
                          ledger=endpoints.ledger)
    finally:
        if own_endpoints:
            endpoints.close()


def compare_paradigms(report_a: RunReport, report_b: RunReport) -> list[ComparisonRow]:
    """Side-by-side rows for two runs of the same scenario and seed.

    The byte ratio column is each run's total divided by the first run's
    total, so the first row always reads 1.0.
    """
    if report_a.scenario != report_b.scenario or report_a.seed != report_b.seed:
        raise ScenarioMismatchError(
            f"cannot compare {report_a.scenario!r} seed {report_a.seed} with "
            f"{report_b.scenario!r} seed {report_b.seed}")
    base = report_a.total_bytes()
    rows = []
    for report in (report_a, report_b):
        total = report.total_bytes()
        final = report.final_round()
        if base > 0:
            ratio = total / base
        else:
            ratio = 1.0 if total == 0 else float("inf")
        rows.append(ComparisonRow(label=report.strategy,
                                  accuracy=final.ensemble_accuracy,
                                  macro_f1=final.ensemble_macro_f1,
                                  total_bytes=total, byte_ratio=ratio))
    return rows
