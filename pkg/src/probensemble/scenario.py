"""Scenario files: a flat, line-oriented `key = value` format.

One file describes a complete run: dataset shape, client roster, fusion
strategy, optimizer settings, distillation schedule, transport, and the
mandatory seed. Client blocks repeat; each starts at a `client.id` line and
collects `client.*` keys until the next block. `#` starts a comment.

Parsing is strict by design: unknown keys, malformed values, and semantic
violations are all collected and reported together, so a bad file fails
loudly with every problem named. The canonical echo written by a run
contains every effective key (defaults applied, no filesystem paths) and
loads back to an identical config.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import pathlib

from .distillation import DistillationConfig
from .errors import ConfigError, ParseError, ValidationError
from .learners import DatasetSpec
from .optimizers import GaConfig, PsoConfig

STRATEGIES = ("mean", "weighted", "stacking", "ga", "pso", "fedavg")
TRANSPORTS = ("inproc", "tcp")
PARTITIONS = ("iid", "label-skew")
CLIENT_KINDS = ("synthetic", "trainable")


@dataclasses.dataclass(frozen=True)
class ClientSpec:
    id: int
    kind: str
    # synthetic knobs
    expert_classes: tuple[int, ...] = ()
    strength: float = 0.8
    concentration: float | None = None  # None means exact profile rows
    # True: the model only ever assigns mass to its expert classes
    restrict: bool = False
    # trainable knobs
    epochs: int = 50
    learning_rate: float = 0.1
    l2: float = 0.0
    epochs_per_round: int = 0
    # either kind
    drop_at_round: int | None = None


@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    strategy: str
    transport: str
    dataset: DatasetSpec
    partition: str
    partition_skew: float
    ref_fraction: float
    distill: DistillationConfig
    ga: GaConfig
    pso: PsoConfig
    clients: tuple[ClientSpec, ...]


_DATASET_DEFAULTS = {"classes": 5, "features": 8, "train": 500, "val": 200,
                     "test": 300, "separation": 3.0}

# key name -> coercion kind
_TOP_KEYS = {
    "name": "str", "seed": "int", "strategy": "str", "transport": "str",
    "dataset.classes": "int", "dataset.features": "int", "dataset.train": "int",
    "dataset.val": "int", "dataset.test": "int", "dataset.separation": "float",
    "partition": "str", "partition.skew": "float", "ref.fraction": "float",
    "distill.rounds": "int", "distill.min_contributions": "int",
    "distill.learning_rate": "float", "distill.steps": "int",
    "distill.epsilon": "float", "distill.local_mix": "float",
    "distill.convergence_tol": "float",
    "ga.population": "int", "ga.generations": "int", "ga.elite": "int",
    "ga.mutation_prob": "float", "ga.mutation_sigma": "float",
    "ga.diversity_period": "int", "ga.diversity_count": "int",
    "pso.swarm": "int", "pso.iterations": "int", "pso.inertia": "float",
    "pso.cognitive": "float", "pso.social": "float",
}

_CLIENT_KEYS = {
    "client.id": "int", "client.kind": "str", "client.expert_classes": "int_list",
    "client.strength": "float", "client.concentration": "concentration",
    "client.restrict": "bool",
    "client.epochs": "int", "client.learning_rate": "float", "client.l2": "float",
    "client.epochs_per_round": "int", "client.drop_at_round": "int",
}


def _parse_lines(text: str, origin: str) -> list[tuple[int, str, str]]:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ParseError(f"{origin}:{lineno}: empty key")
        if not value:
            raise ParseError(f"{origin}:{lineno}: empty value for key {key!r}")
        entries.append((lineno, key, value))
    return entries


class _Coercer:
    def __init__(self, origin: str):
        self.origin = origin
        self.violations: list[str] = []

    def complain(self, lineno: int, message: str) -> None:
        self.violations.append(f"{self.origin}:{lineno}: {message}")

    def coerce(self, lineno: int, key: str, value: str, kind: str):
        try:
            if kind == "int":
                return int(value)
            if kind == "float":
                return float(value)
            if kind == "int_list":
                return tuple(int(part.strip()) for part in value.split(",") if part.strip())
            if kind == "concentration":
                if value == "exact":
                    return None
                out = float(value)
                if out <= 0:
                    raise ValueError("must be positive or 'exact'")
                return out
            if kind == "bool":
                if value in ("true", "false"):
                    return value == "true"
                raise ValueError("expected 'true' or 'false'")
            return value
        except ValueError as exc:
            self.complain(lineno, f"key {key!r}: cannot read {value!r} as {kind} ({exc})")
            return None

    def finish(self) -> None:
        if self.violations:
            raise ValidationError("invalid scenario:\n  " + "\n  ".join(self.violations))


def loads_scenario(text: str, origin: str = "<string>") -> ScenarioConfig:
    entries = _parse_lines(text, origin)
    co = _Coercer(origin)
    top: dict[str, object] = {}
    top_lines: dict[str, int] = {}
    client_blocks: list[dict[str, object]] = []
    for lineno, key, value in entries:
        if key in _CLIENT_KEYS:
            if key == "client.id":
                client_blocks.append({})
            if not client_blocks:
                co.complain(lineno, f"key {key!r} before any client.id line")
                continue
            block = client_blocks[-1]
            short = key[len("client."):]
            if short in block:
                co.complain(lineno, f"duplicate key {key!r} in one client block")
                continue
            parsed = co.coerce(lineno, key, value, _CLIENT_KEYS[key])
            if parsed is not None:
                block[short] = parsed
        elif key in _TOP_KEYS:
            if key in top:
                co.complain(lineno, f"duplicate key {key!r}")
                continue
            parsed = co.coerce(lineno, key, value, _TOP_KEYS[key])
            if parsed is not None:
                top[key] = parsed
                top_lines[key] = lineno
        else:
            co.complain(lineno, f"unknown key {key!r}")

    for key, allowed in (("strategy", STRATEGIES), ("transport", TRANSPORTS),
                         ("partition", PARTITIONS)):
        if key in top and top[key] not in allowed:
            co.complain(top_lines[key], f"{key} must be one of {allowed}, got {top[key]!r}")
            del top[key]
    if "name" not in top:
        co.complain(0, "missing required key 'name'")
    if "seed" not in top:
        co.complain(0, "missing required key 'seed' (runs must be reproducible)")

    dataset = None
    try:
        dataset = DatasetSpec(
            n_classes=int(top.get("dataset.classes", _DATASET_DEFAULTS["classes"])),
            n_features=int(top.get("dataset.features", _DATASET_DEFAULTS["features"])),
            n_train=int(top.get("dataset.train", _DATASET_DEFAULTS["train"])),
            n_val=int(top.get("dataset.val", _DATASET_DEFAULTS["val"])),
            n_test=int(top.get("dataset.test", _DATASET_DEFAULTS["test"])),
            cluster_separation=float(top.get("dataset.separation",
                                             _DATASET_DEFAULTS["separation"])))
    except ValueError as exc:
        co.complain(0, f"dataset: {exc}")

    distill = None
    try:
        distill = DistillationConfig(
            kd_learning_rate=float(top.get("distill.learning_rate", 0.05)),
            kd_steps=int(top.get("distill.steps", 10)),
            epsilon=float(top.get("distill.epsilon", 1e-9)),
            rounds=int(top.get("distill.rounds", 3)),
            min_contributions=int(top.get("distill.min_contributions", 2)),
            local_mix=float(top.get("distill.local_mix", 0.0)),
            convergence_tol=float(top.get("distill.convergence_tol", 1e-6)))
    except ValueError as exc:
        co.complain(0, f"distill: {exc}")

    ga = None
    try:
        ga = GaConfig(
            population_size=int(top.get("ga.population", 40)),
            generations=int(top.get("ga.generations", 100)),
            elite_count=int(top.get("ga.elite", 5)),
            mutation_prob=float(top.get("ga.mutation_prob", 0.3)),
            mutation_sigma=float(top.get("ga.mutation_sigma", 0.1)),
            diversity_period=int(top.get("ga.diversity_period", 10)),
            diversity_count=int(top.get("ga.diversity_count", 5)))
    except ValueError as exc:
        co.complain(0, f"ga: {exc}")

    pso = None
    try:
        pso = PsoConfig(
            swarm_size=int(top.get("pso.swarm", 20)),
            iterations=int(top.get("pso.iterations", 100)),
            inertia=float(top.get("pso.inertia", 0.7)),
            cognitive=float(top.get("pso.cognitive", 1.5)),
            social=float(top.get("pso.social", 1.5)))
    except ValueError as exc:
        co.complain(0, f"pso: {exc}")

    ref_fraction = float(top.get("ref.fraction", 0.2))
    if not 0.0 < ref_fraction <= 1.0:
        co.complain(0, f"ref.fraction must lie in (0, 1], got {ref_fraction}")
    skew = float(top.get("partition.skew", 0.5))
    if skew <= 0:
        co.complain(0, f"partition.skew must be positive, got {skew}")

    clients = []
    seen_ids: set[int] = set()
    n_classes = dataset.n_classes if dataset is not None else None
    for i, block in enumerate(client_blocks, start=1):
        cid = block.get("id")
        if not isinstance(cid, int) or cid <= 0:
            co.complain(0, f"client block {i}: id must be a positive integer")
            continue
        if cid in seen_ids:
            co.complain(0, f"client block {i}: duplicate client id {cid}")
            continue
        seen_ids.add(cid)
        kind = block.get("kind", "synthetic")
        if kind not in CLIENT_KINDS:
            co.complain(0, f"client {cid}: kind must be one of {CLIENT_KINDS}, got {kind!r}")
            continue
        synth_only = {"expert_classes", "strength", "concentration", "restrict"}
        train_only = {"epochs", "learning_rate", "l2", "epochs_per_round"}
        wrong = (set(block) - {"id", "kind", "drop_at_round"}
                 - (synth_only if kind == "synthetic" else train_only))
        if wrong:
            co.complain(0, f"client {cid}: keys {sorted(wrong)} do not apply to kind {kind!r}")
            continue
        spec = ClientSpec(
            id=cid, kind=kind,
            expert_classes=tuple(block.get("expert_classes", ())),
            strength=float(block.get("strength", 0.8)),
            concentration=block.get("concentration"),
            restrict=bool(block.get("restrict", False)),
            epochs=int(block.get("epochs", 50)),
            learning_rate=float(block.get("learning_rate", 0.1)),
            l2=float(block.get("l2", 0.0)),
            epochs_per_round=int(block.get("epochs_per_round", 0)),
            drop_at_round=block.get("drop_at_round"))
        if kind == "synthetic" and n_classes is not None:
            bad = [c for c in spec.expert_classes if not 0 <= c < n_classes]
            if bad:
                co.complain(0, f"client {cid}: expert classes {bad} outside "
                               f"0..{n_classes - 1}")
        if spec.restrict and not spec.expert_classes:
            co.complain(0, f"client {cid}: restrict = true needs expert classes")
        if not 0.0 < spec.strength <= 1.0:
            co.complain(0, f"client {cid}: strength must lie in (0, 1]")
        if spec.drop_at_round is not None and spec.drop_at_round < 1:
            co.complain(0, f"client {cid}: drop_at_round must be >= 1")
        if kind == "trainable" and (spec.epochs < 0 or spec.learning_rate <= 0
                                    or spec.l2 < 0 or spec.epochs_per_round < 0):
            co.complain(0, f"client {cid}: training settings out of range")
        clients.append(spec)

    if not clients and not co.violations:
        co.complain(0, "at least one client is required")
    strategy = str(top.get("strategy", "mean"))
    if distill is not None and clients and distill.min_contributions > len(clients):
        co.complain(0, f"distill.min_contributions = {distill.min_contributions} "
                       f"exceeds the {len(clients)} configured clients")
    if strategy == "fedavg":
        non_trainable = [c.id for c in clients if c.kind != "trainable"]
        if non_trainable:
            co.complain(0, f"strategy fedavg needs trainable clients only, "
                           f"clients {non_trainable} are synthetic")
    co.finish()

    return ScenarioConfig(
        name=str(top["name"]), seed=int(top["seed"]), strategy=strategy,
        transport=str(top.get("transport", "inproc")), dataset=dataset,
        partition=str(top.get("partition", "iid")), partition_skew=skew,
        ref_fraction=ref_fraction, distill=distill, ga=ga, pso=pso,
        clients=tuple(sorted(clients, key=lambda c: c.id)))


def load_scenario(path: str | pathlib.Path) -> ScenarioConfig:
    path = pathlib.Path(path)
    if not path.is_file():
        raise ConfigError(f"no scenario file at {path}")
    return loads_scenario(path.read_text(), origin=str(path))


def echo_text(config: ScenarioConfig) -> str:
    """Canonical serialization with every effective key; loads back equal."""
    def f(x: float) -> str:
        return repr(float(x))

    lines = [
        f"name = {config.name}",
        f"seed = {config.seed}",
        f"strategy = {config.strategy}",
        f"transport = {config.transport}",
        f"dataset.classes = {config.dataset.n_classes}",
        f"dataset.features = {config.dataset.n_features}",
        f"dataset.train = {config.dataset.n_train}",
        f"dataset.val = {config.dataset.n_val}",
        f"dataset.test = {config.dataset.n_test}",
        f"dataset.separation = {f(config.dataset.cluster_separation)}",
        f"partition = {config.partition}",
        f"partition.skew = {f(config.partition_skew)}",
        f"ref.fraction = {f(config.ref_fraction)}",
        f"distill.rounds = {config.distill.rounds}",
        f"distill.min_contributions = {config.distill.min_contributions}",
        f"distill.learning_rate = {f(config.distill.kd_learning_rate)}",
        f"distill.steps = {config.distill.kd_steps}",
        f"distill.epsilon = {f(config.distill.epsilon)}",
        f"distill.local_mix = {f(config.distill.local_mix)}",
        f"distill.convergence_tol = {f(config.distill.convergence_tol)}",
        f"ga.population = {config.ga.population_size}",
        f"ga.generations = {config.ga.generations}",
        f"ga.elite = {config.ga.elite_count}",
        f"ga.mutation_prob = {f(config.ga.mutation_prob)}",
        f"ga.mutation_sigma = {f(config.ga.mutation_sigma)}",
        f"ga.diversity_period = {config.ga.diversity_period}",
        f"ga.diversity_count = {config.ga.diversity_count}",
        f"pso.swarm = {config.pso.swarm_size}",
        f"pso.iterations = {config.pso.iterations}",
        f"pso.inertia = {f(config.pso.inertia)}",
        f"pso.cognitive = {f(config.pso.cognitive)}",
        f"pso.social = {f(config.pso.social)}",
    ]
    for client in config.clients:
        lines.append("")
        lines.append(f"client.id = {client.id}")
        lines.append(f"client.kind = {client.kind}")
        if client.kind == "synthetic":
            if client.expert_classes:
                joined = ",".join(str(c) for c in client.expert_classes)
                lines.append(f"client.expert_classes = {joined}")
            lines.append(f"client.strength = {f(client.strength)}")
            conc = "exact" if client.concentration is None else f(client.concentration)
            lines.append(f"client.concentration = {conc}")
            lines.append(f"client.restrict = {'true' if client.restrict else 'false'}")
        else:
            lines.append(f"client.epochs = {client.epochs}")
            lines.append(f"client.learning_rate = {f(client.learning_rate)}")
            lines.append(f"client.l2 = {f(client.l2)}")
            lines.append(f"client.epochs_per_round = {client.epochs_per_round}")
        if client.drop_at_round is not None:
            lines.append(f"client.drop_at_round = {client.drop_at_round}")
    return "\n".join(lines) + "\n"


def shipped_scenarios() -> dict[str, pathlib.Path]:
    """Name -> path for the scenario files installed with the package."""
    root = importlib.resources.files("probensemble") / "scenarios"
    out = {}
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".scn"):
            out[entry.name[:-len(".scn")]] = pathlib.Path(str(entry))
    return out


def resolve_scenario(arg: str) -> pathlib.Path:
    """A scenario argument is a filesystem path or a shipped scenario name."""
    path = pathlib.Path(arg)
    if path.is_file():
        return path
    shipped = shipped_scenarios()
    name = arg[:-len(".scn")] if arg.endswith(".scn") else arg
    if name in shipped:
        return shipped[name]
    known = ", ".join(sorted(shipped))
    raise ConfigError(f"no scenario file or shipped scenario named {arg!r} "
                      f"(shipped: {known})")
