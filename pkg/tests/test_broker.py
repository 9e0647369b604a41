"""In-process broker semantics: delivery, byte accounting, ordering, TCP transport."""

import threading
import time

import numpy as np
import pytest

from probensemble.broker import (
    DOWN,
    UP,
    Broker,
    ByteLedger,
    TcpBrokerServer,
    TcpClient,
    contrib_topic,
    ensemble_topic,
    params_topic,
    topic_for,
)
from probensemble.errors import BrokerUnavailableError
from probensemble.wire import (
    KIND_BROADCAST,
    KIND_CONTRIBUTION,
    KIND_PARAMETERS,
    SERVER_ID,
    ContributionMessage,
    EnsembleBroadcast,
    ParameterMessage,
    messages_equal,
    serialize,
    serialized_size,
)

from oracles import oracle_prob_message_size


def contribution(rng, client_id=3, round=1, n=4, c=3):
    raw = rng.random((n, c)) + 0.05
    probs = raw / raw.sum(axis=1, keepdims=True)
    return ContributionMessage(
        client_id=client_id,
        round=round,
        sample_ids=np.arange(n, dtype=np.uint64),
        probs=probs,
    )


class TestTopics:
    def test_topic_names(self):
        assert contrib_topic(4) == "contrib/4"
        assert ensemble_topic(0) == "ensemble/0"
        assert params_topic(17) == "params/17"

    def test_topic_for_dispatches_on_message_kind(self, rng):
        msg = contribution(rng, round=6)
        assert topic_for(msg) == "contrib/6"
        bcast = EnsembleBroadcast(
            round=2,
            sample_ids=np.array([0], dtype=np.uint64),
            probs=np.array([[1.0, 0.0]]),
        )
        assert topic_for(bcast) == "ensemble/2"
        params = ParameterMessage(
            client_id=1, round=9, params=np.zeros(3, dtype=np.float32)
        )
        assert topic_for(params) == "params/9"


class TestDelivery:
    def test_subscriber_receives_decoded_copy(self, rng):
        broker = Broker()
        sub = broker.subscribe(contrib_topic(1))
        msg = contribution(rng)
        broker.publish(contrib_topic(1), msg)
        got = sub.poll(timeout=1.0)
        assert got is not None
        assert got.client_id == msg.client_id
        # payload travels as f32, so exact equality only at wire precision
        np.testing.assert_allclose(got.probs, msg.probs, atol=1e-5)
        assert messages_equal(got, msg)
        broker.shutdown()

    def test_publish_returns_subscriber_count(self, rng):
        broker = Broker()
        broker.subscribe(contrib_topic(1))
        broker.subscribe(contrib_topic(1))
        n = broker.publish(contrib_topic(1), contribution(rng))
        assert n == 2
        assert broker.publish(contrib_topic(99), contribution(rng, round=99)) == 0
        broker.shutdown()

    def test_at_most_once_no_replay_for_late_subscriber(self, rng):
        broker = Broker()
        broker.publish(contrib_topic(1), contribution(rng))
        late = broker.subscribe(contrib_topic(1))
        assert late.poll(timeout=0.05) is None
        broker.shutdown()

    def test_per_subscriber_fifo_order(self, rng):
        broker = Broker()
        sub = broker.subscribe(contrib_topic(1))
        for r in range(8):
            msg = contribution(rng, client_id=r + 1)
            broker.publish(contrib_topic(1), msg)
        seen = [sub.poll(timeout=1.0).client_id for _ in range(8)]
        assert seen == list(range(1, 9))
        broker.shutdown()

    def test_poll_timeout_returns_none(self):
        broker = Broker()
        sub = broker.subscribe(contrib_topic(1))
        assert sub.poll(timeout=0.02) is None
        broker.shutdown()

    def test_poll_wakes_on_concurrent_publish(self, rng):
        broker = Broker()
        sub = broker.subscribe(contrib_topic(1))
        msg = contribution(rng)

        def later():
            broker.publish(contrib_topic(1), msg)

        t = threading.Timer(0.05, later)
        t.start()
        got = sub.poll(timeout=2.0)
        t.join()
        assert got is not None and got.client_id == msg.client_id
        broker.shutdown()

    def test_subscribe_rejects_empty_topic(self):
        broker = Broker()
        with pytest.raises(ValueError):
            broker.subscribe("")
        broker.shutdown()

    def test_shutdown_closes_broker(self, rng):
        broker = Broker()
        sub = broker.subscribe(contrib_topic(1))
        broker.shutdown()
        with pytest.raises(BrokerUnavailableError):
            broker.subscribe(contrib_topic(2))
        with pytest.raises(BrokerUnavailableError):
            broker.publish(contrib_topic(1), contribution(rng))
        assert sub.poll(timeout=0.01) is None


class TestLedger:
    def test_bytes_equal_serialized_length(self, rng):
        broker = Broker()
        msg = contribution(rng, n=7, c=4)
        broker.publish(contrib_topic(1), msg)
        entries = broker.ledger.entries()
        assert len(entries) == 1
        cid, direction, kind, count, nbytes = entries[0]
        assert (cid, direction, kind, count) == (msg.client_id, UP, KIND_CONTRIBUTION, 1)
        assert nbytes == len(serialize(msg))
        assert nbytes == oracle_prob_message_size(7, 4)
        broker.shutdown()

    def test_direction_down_iff_sender_is_server(self, rng):
        broker = Broker()
        bcast = EnsembleBroadcast(
            round=1,
            sample_ids=np.array([0, 1], dtype=np.uint64),
            probs=np.array([[0.5, 0.5], [0.25, 0.75]]),
        )
        broker.publish(ensemble_topic(1), bcast)
        broker.publish(contrib_topic(1), contribution(rng))
        dirs = {(e[0], e[1]) for e in broker.ledger.entries()}
        assert (SERVER_ID, DOWN) in dirs
        assert (3, UP) in dirs
        broker.shutdown()

    def test_records_publishes_not_deliveries(self, rng):
        # same message fanned out to two subscribers still counts once
        broker = Broker()
        broker.subscribe(contrib_topic(1))
        broker.subscribe(contrib_topic(1))
        broker.publish(contrib_topic(1), contribution(rng))
        assert broker.ledger.total_bytes() == oracle_prob_message_size(4, 3)
        # zero subscribers also counts once, folded into the same row
        broker.publish(contrib_topic(2), contribution(rng, round=2))
        (entry,) = broker.ledger.entries()
        assert entry == (3, UP, KIND_CONTRIBUTION, 2, 2 * oracle_prob_message_size(4, 3))
        broker.shutdown()

    def test_entries_accumulate_and_sort(self):
        ledger = ByteLedger()
        ledger.record(5, UP, KIND_CONTRIBUTION, 100)
        ledger.record(2, UP, KIND_CONTRIBUTION, 50)
        ledger.record(5, UP, KIND_CONTRIBUTION, 70)
        ledger.record(2, DOWN, KIND_PARAMETERS, 30)
        entries = ledger.entries()
        assert entries == sorted(entries)
        by_key = {(e[0], e[1], e[2]): (e[3], e[4]) for e in entries}
        assert by_key[(5, UP, KIND_CONTRIBUTION)] == (2, 170)
        assert by_key[(2, UP, KIND_CONTRIBUTION)] == (1, 50)
        assert by_key[(2, DOWN, KIND_PARAMETERS)] == (1, 30)

    def test_snapshot_keyed_by_kind_name_and_direction(self):
        ledger = ByteLedger()
        ledger.record(1, UP, KIND_CONTRIBUTION, 48)
        ledger.record(3, UP, KIND_CONTRIBUTION, 48)
        ledger.record(0, DOWN, KIND_BROADCAST, 96)
        ledger.record(2, UP, KIND_PARAMETERS, 4020)
        snap = ledger.snapshot()
        assert snap[("contribution", UP)] == 96
        assert snap[("broadcast", DOWN)] == 96
        assert snap[("parameters", UP)] == 4020

    def test_total_bytes_filters(self):
        ledger = ByteLedger()
        ledger.record(1, UP, KIND_CONTRIBUTION, 10)
        ledger.record(0, DOWN, KIND_BROADCAST, 20)
        assert ledger.total_bytes() == 30
        assert ledger.total_bytes(kind=KIND_CONTRIBUTION) == 10
        assert ledger.total_bytes(direction=DOWN) == 20
        assert ledger.total_bytes(kind=KIND_PARAMETERS) == 0


class TestTcpTransport:
    def test_round_trip_both_directions(self, rng):
        server = TcpBrokerServer()
        try:
            client = TcpClient(server.host, server.port)
            try:
                # upstream: client -> server broker
                server_sub = server.subscribe(contrib_topic(1))
                msg = contribution(rng, client_id=9)
                client.publish(contrib_topic(1), msg)
                got = server_sub.poll(timeout=2.0)
                assert got is not None and messages_equal(got, msg)

                # downstream: server broadcast -> connected client socket
                client_sub = client.subscribe(ensemble_topic(1))
                bcast = EnsembleBroadcast(
                    round=1,
                    sample_ids=np.arange(3, dtype=np.uint64),
                    probs=rng.dirichlet(np.ones(4), size=3),
                )
                server.publish(ensemble_topic(1), bcast)
                down = client_sub.poll(timeout=2.0)
                assert down is not None and messages_equal(down, bcast)
            finally:
                client.close()
        finally:
            server.shutdown()

    def test_client_publish_rejects_mismatched_topic(self, rng):
        server = TcpBrokerServer()
        try:
            client = TcpClient(server.host, server.port)
            try:
                with pytest.raises(ValueError):
                    client.publish(contrib_topic(2), contribution(rng, round=1))
            finally:
                client.close()
        finally:
            server.shutdown()

    def test_server_ledger_counts_both_directions(self, rng):
        server = TcpBrokerServer()
        try:
            client = TcpClient(server.host, server.port)
            try:
                msg = contribution(rng, n=2, c=3)
                client.publish(contrib_topic(1), msg)
                for _ in range(100):
                    if server.broker.ledger.total_bytes() > 0:
                        break
                    time.sleep(0.02)
                bcast = EnsembleBroadcast(
                    round=1,
                    sample_ids=np.array([0], dtype=np.uint64),
                    probs=np.array([[1.0, 0.0, 0.0]]),
                )
                server.publish(ensemble_topic(1), bcast)
                snap = server.broker.ledger.snapshot()
                assert snap[("contribution", UP)] == serialized_size(msg)
                assert snap[("broadcast", DOWN)] == serialized_size(bcast)
            finally:
                client.close()
        finally:
            server.shutdown()
