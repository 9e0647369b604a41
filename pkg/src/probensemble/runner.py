"""Turn a scenario config into a finished run with artifacts on disk.

Builds the dataset and fleet, hands them to the appropriate protocol loop,
cross-checks the byte ledger against the wire-format size formulas, writes
the replay-checked CSV artifacts plus the config echo, and renders figures
next to them.
"""

from __future__ import annotations

import dataclasses
import logging
import pathlib

import numpy as np

from .broker import KIND_NAMES
from .clients import Client, SyntheticClient, TrainableClient
from .coordinator import (
    Endpoints,
    LoopResult,
    StrategyChoice,
    inproc_endpoints,
    run_fedavg_baseline,
    run_feedback_loop,
    tcp_endpoints,
)
from .distillation import ReferenceSet
from .errors import MissingArtifactError, ProbEnsembleError
from .learners import (
    Dataset,
    SoftmaxLinearModel,
    SyntheticClassifier,
    expert_profile,
    generate_dataset,
    partition_iid,
    partition_label_skew,
    restricted_expert_profile,
)
from .reporting import RunReport, render_figures, write_artifacts
from .scenario import ScenarioConfig, echo_text
from .wire import (
    KIND_PARAMETERS,
    parameter_message_size,
    probability_message_size,
)

log = logging.getLogger(__name__)

STREAM_REF = 31

ARTIFACT_NAMES = ("report.csv", "trace.csv", "bytes.csv", "config.echo")


@dataclasses.dataclass
class BuiltScenario:
    config: ScenarioConfig
    dataset: Dataset
    clients: list[Client]
    ref: ReferenceSet
    drop_at_round: dict[int, int]


def build_scenario(config: ScenarioConfig) -> BuiltScenario:
    """Materialize dataset, reference set, and client fleet from a config."""
    dataset = generate_dataset(config.dataset, config.seed)
    labels_by_id = {}
    for split in (dataset.train, dataset.val, dataset.test):
        labels_by_id.update(split.label_lookup())

    n_val = len(dataset.val.sample_ids)
    n_ref = max(1, round(config.ref_fraction * n_val))
    rng = np.random.default_rng([config.seed, STREAM_REF])
    picked = np.sort(rng.choice(n_val, size=n_ref, replace=False))
    ref_ids = dataset.val.sample_ids[picked]
    ref = ReferenceSet(sample_ids=ref_ids, features=dataset.val.features[picked])

    trainable_specs = [c for c in config.clients if c.kind == "trainable"]
    shards = {}
    if trainable_specs:
        if config.partition == "iid":
            parts = partition_iid(dataset.train, len(trainable_specs), config.seed)
        else:
            parts = partition_label_skew(dataset.train, len(trainable_specs),
                                         config.partition_skew, config.seed)
        shards = {spec.id: part for spec, part in zip(trainable_specs, parts)}

    clients: list[Client] = []
    drop_at_round: dict[int, int] = {}
    for spec in config.clients:
        if spec.kind == "synthetic":
            build_profile = restricted_expert_profile if spec.restrict else expert_profile
            profile = build_profile(config.dataset.n_classes, spec.expert_classes,
                                    spec.strength)
            classifier = SyntheticClassifier(profile, concentration=spec.concentration,
                                             rng_seed=(config.seed, spec.id))
            clients.append(SyntheticClient(spec.id, classifier, labels_by_id))
        else:
            model = SoftmaxLinearModel.zeros(config.dataset.n_classes,
                                             config.dataset.n_features)
            clients.append(TrainableClient(
                spec.id, model, shards[spec.id], epochs=spec.epochs,
                learning_rate=spec.learning_rate, l2=spec.l2,
                epochs_per_round=spec.epochs_per_round))
        if spec.drop_at_round is not None:
            drop_at_round[spec.id] = spec.drop_at_round
    return BuiltScenario(config=config, dataset=dataset, clients=clients, ref=ref,
                         drop_at_round=drop_at_round)


def verify_byte_ledger(byte_rows: list[tuple[int, str, str, int, int]],
                       n_ref: int, n_classes: int, n_params: int) -> None:
    """Every ledger cell must equal its message count times the wire-format
    size formula; a mismatch means the transport miscounted."""
    prob_size = probability_message_size(n_ref, n_classes)
    param_size = parameter_message_size(n_params)
    for client_id, direction, kind, messages, nbytes in byte_rows:
        expected = (param_size if kind == KIND_NAMES[KIND_PARAMETERS] else prob_size)
        if nbytes != messages * expected:
            raise ProbEnsembleError(
                f"byte ledger mismatch for client {client_id} {direction}/{kind}: "
                f"{nbytes} bytes from {messages} messages, expected "
                f"{messages} x {expected}")


def _ledger_rows(result: LoopResult) -> list[tuple[int, str, str, int, int]]:
    return [(cid, direction, KIND_NAMES[kind], messages, nbytes)
            for cid, direction, kind, messages, nbytes in result.ledger.entries()]


def run_scenario(config: ScenarioConfig, out_dir: str | pathlib.Path | None = None,
                 transport: str | None = None, seed: int | None = None,
                 figures: bool = True) -> RunReport:
    """Execute a scenario end to end; write artifacts when out_dir is given."""
    if seed is not None and seed != config.seed:
        config = dataclasses.replace(config, seed=seed)
    mode = transport if transport is not None else config.transport

    built = build_scenario(config)
    run_seed = config.seed
    choice = StrategyChoice(
        kind=config.strategy,
        ga=dataclasses.replace(config.ga, rng_seed=run_seed),
        pso=dataclasses.replace(config.pso, rng_seed=run_seed))

    endpoints: Endpoints
    if mode == "tcp":
        endpoints = tcp_endpoints(built.clients)
    elif mode == "inproc":
        endpoints = inproc_endpoints(built.clients)
    else:
        raise ValueError(f"unknown transport {mode!r}")

    try:
        if config.strategy == "fedavg":
            result = run_fedavg_baseline(
                built.clients, config.distill.rounds, config.distill,
                built.dataset.test, run_seed, endpoints=endpoints,
                drop_at_round=built.drop_at_round)
        else:
            result = run_feedback_loop(
                built.clients, choice, built.ref, config.distill,
                built.dataset.val, built.dataset.test, run_seed,
                endpoints=endpoints, drop_at_round=built.drop_at_round)
    finally:
        endpoints.close()

    n_params = (config.dataset.n_classes * config.dataset.n_features
                + config.dataset.n_classes)
    byte_rows = _ledger_rows(result)
    verify_byte_ledger(byte_rows, len(built.ref), config.dataset.n_classes, n_params)

    report = RunReport(
        scenario=config.name, seed=run_seed, strategy=config.strategy,
        client_ids=tuple(spec.id for spec in config.clients),
        rounds=result.records, traces=result.traces, byte_rows=byte_rows,
        config_echo=echo_text(config))
    if out_dir is not None:
        out_path = pathlib.Path(out_dir)
        write_artifacts(report, out_path)
        if figures:
            render_figures(report, out_path)
    return report


def replay_check(dir_a: str | pathlib.Path, dir_b: str | pathlib.Path,
                 ) -> tuple[bool, str | None]:
    """Byte-compare the replay-checked artifacts of two run directories.

    Returns (True, None) when all four files match, else (False, locator)
    naming the first differing file and line.
    """
    dir_a = pathlib.Path(dir_a)
    dir_b = pathlib.Path(dir_b)
    for name in ARTIFACT_NAMES:
        for d in (dir_a, dir_b):
            if not (d / name).is_file():
                raise MissingArtifactError(f"{d / name} is missing")
    for name in ARTIFACT_NAMES:
        a = (dir_a / name).read_bytes()
        b = (dir_b / name).read_bytes()
        if a == b:
            continue
        a_lines = a.split(b"\n")
        b_lines = b.split(b"\n")
        for i, (la, lb) in enumerate(zip(a_lines, b_lines), start=1):
            if la != lb:
                return False, (f"{name}:{i}: {la.decode(errors='replace')!r} != "
                               f"{lb.decode(errors='replace')!r}")
        return False, f"{name}: lengths differ ({len(a)} vs {len(b)} bytes)"
    return True, None
