"""Scenario execution end to end: artifacts, replay checking, transports."""

import numpy as np
import pytest

from probensemble.errors import MissingArtifactError, ProbEnsembleError
from probensemble.runner import (
    ARTIFACT_NAMES,
    build_scenario,
    replay_check,
    run_scenario,
    verify_byte_ledger,
)
from probensemble.scenario import loads_scenario
from probensemble.wire import probability_message_size


SMALL = """
name = runner-demo
seed = 17
strategy = mean
dataset.classes = 3
dataset.features = 2
dataset.train = 30
dataset.val = 20
dataset.test = 20
distill.rounds = 2
distill.convergence_tol = 0.0

client.id = 1
client.expert_classes = 0
client.id = 2
client.expert_classes = 1
client.id = 3
client.expert_classes = 2
"""

TRAINABLE = """
name = runner-trainable
seed = 21
strategy = mean
dataset.classes = 3
dataset.features = 2
dataset.train = 60
dataset.val = 20
dataset.test = 20
distill.rounds = 2
distill.convergence_tol = 0.0

client.id = 1
client.kind = trainable
client.epochs = 10
client.learning_rate = 0.5
client.id = 2
client.kind = trainable
client.epochs = 10
client.learning_rate = 0.5
"""


class TestBuildScenario:
    def test_reference_set_drawn_from_validation(self):
        built = build_scenario(loads_scenario(SMALL))
        # 20 validation samples at the default 0.2 fraction
        assert len(built.ref) == 4
        val_ids = set(built.dataset.val.sample_ids.tolist())
        assert set(built.ref.sample_ids.tolist()) <= val_ids
        assert np.all(np.diff(built.ref.sample_ids.astype(np.int64)) > 0)

    def test_reference_never_empty(self):
        tiny = SMALL.replace("dataset.val = 20", "dataset.val = 2")
        cfg = loads_scenario(tiny.replace("ref.fraction", ""))
        built = build_scenario(cfg)
        assert len(built.ref) >= 1

    def test_trainable_shards_partition_training_data(self):
        built = build_scenario(loads_scenario(TRAINABLE))
        shard_ids = []
        for client in built.clients:
            shard_ids.extend(client.train_batch.sample_ids.tolist())
        assert sorted(shard_ids) == built.dataset.train.sample_ids.tolist()

    def test_drop_map_comes_from_client_specs(self):
        text = SMALL + "client.id = 4\nclient.expert_classes = 0\nclient.drop_at_round = 2\n"
        built = build_scenario(loads_scenario(text))
        assert built.drop_at_round == {4: 2}

    def test_same_config_same_fleet_outputs(self):
        a = build_scenario(loads_scenario(SMALL))
        b = build_scenario(loads_scenario(SMALL))
        np.testing.assert_array_equal(a.dataset.test.features, b.dataset.test.features)
        np.testing.assert_array_equal(a.ref.sample_ids, b.ref.sample_ids)


class TestVerifyByteLedger:
    def test_accepts_exact_formula_rows(self):
        size = probability_message_size(4, 3)
        rows = [(1, "up", "contribution", 2, 2 * size),
                (0, "down", "broadcast", 2, 2 * size),
                (2, "up", "parameters", 1, 20 + 4 * 11)]
        verify_byte_ledger(rows, n_ref=4, n_classes=3, n_params=11)

    def test_rejects_any_mismatch(self):
        size = probability_message_size(4, 3)
        with pytest.raises(ProbEnsembleError):
            verify_byte_ledger([(1, "up", "contribution", 2, 2 * size - 1)],
                               n_ref=4, n_classes=3, n_params=11)


class TestRunScenario:
    def test_writes_artifacts_and_figures(self, tmp_path):
        report = run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "run")
        for name in ARTIFACT_NAMES:
            assert (tmp_path / "run" / name).is_file()
        assert (tmp_path / "run" / "figures" / "accuracy.png").is_file()
        assert (tmp_path / "run" / "figures" / "kd.png").is_file()
        # mean strategy has no optimizer trace to plot
        assert not (tmp_path / "run" / "figures" / "optimizer.png").exists()
        assert len(report.rounds) == 2
        assert report.scenario == "runner-demo"

    def test_figures_can_be_skipped(self, tmp_path):
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "run", figures=False)
        assert not (tmp_path / "run" / "figures").exists()
        for name in ARTIFACT_NAMES:
            assert (tmp_path / "run" / name).is_file()

    def test_seed_override_rebuilds_world(self, tmp_path):
        base = run_scenario(loads_scenario(SMALL), figures=False)
        other = run_scenario(loads_scenario(SMALL), seed=99, figures=False)
        assert base.seed == 17 and other.seed == 99
        assert "seed = 99" in other.config_echo

    def test_trainable_scenario_runs(self, tmp_path):
        report = run_scenario(loads_scenario(TRAINABLE), out_dir=tmp_path / "t",
                              figures=False)
        assert len(report.rounds) == 2
        kd_kinds = {t[0] for t in report.traces}
        assert "kd_client_1" in kd_kinds and "kd_client_2" in kd_kinds

    def test_unknown_transport_rejected(self):
        with pytest.raises(ValueError):
            run_scenario(loads_scenario(SMALL), transport="carrier-pigeon")


class TestReplayCheck:
    def test_same_seed_runs_are_byte_identical(self, tmp_path):
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "a", figures=False)
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "b", figures=False)
        ok, locator = replay_check(tmp_path / "a", tmp_path / "b")
        assert ok and locator is None

    def test_different_seed_detected_with_locator(self, tmp_path):
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "a", figures=False)
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "b", seed=99,
                     figures=False)
        ok, locator = replay_check(tmp_path / "a", tmp_path / "b")
        assert not ok
        name, line = locator.split(":")[0], locator.split(":")[1]
        assert name in ARTIFACT_NAMES
        assert line.split()[0].isdigit() or "lengths differ" in locator

    def test_missing_artifact_raises(self, tmp_path):
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "a", figures=False)
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "b", figures=False)
        (tmp_path / "b" / "trace.csv").unlink()
        with pytest.raises(MissingArtifactError):
            replay_check(tmp_path / "a", tmp_path / "b")

    def test_tcp_transport_matches_inproc_byte_for_byte(self, tmp_path):
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "inproc",
                     transport="inproc", figures=False)
        run_scenario(loads_scenario(SMALL), out_dir=tmp_path / "tcp",
                     transport="tcp", figures=False)
        ok, locator = replay_check(tmp_path / "inproc", tmp_path / "tcp")
        assert ok, locator
