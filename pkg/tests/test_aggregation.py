"""Alignment, probability fusion rules, and the stacking meta-learner."""

import numpy as np
import pytest

from probensemble.aggregation import (
    AlignedProbabilities,
    StackingModel,
    accuracy_weights,
    align,
    build_features,
    mean_fuse,
    train_stacking,
    weighted_fuse,
)
from probensemble.core import validate_simplex
from probensemble.errors import (
    DuplicateClientError,
    EmptyAlignmentError,
    InconsistentCError,
    OrderMismatchError,
    SingleClassError,
    TruncatedError,
    WireFormatError,
)
from probensemble.learners import SoftmaxLinearModel

from conftest import make_contribution, random_simplex_rows


def aligned_fixture(rng, n=6, m=3, c=4, seed_ids=0):
    ids = np.arange(seed_ids, seed_ids + n)
    msgs = [
        make_contribution(cid, ids, random_simplex_rows(rng, n, c))
        for cid in range(1, m + 1)
    ]
    return align(msgs)


class TestAlign:
    def test_inner_join_on_shared_ids(self, rng):
        a = make_contribution(2, [0, 1, 2, 3], random_simplex_rows(rng, 4, 3))
        b = make_contribution(1, [1, 2, 3, 4], random_simplex_rows(rng, 4, 3))
        out = align([a, b])
        np.testing.assert_array_equal(out.sample_ids, [1, 2, 3])
        assert out.model_order == (1, 2)
        assert out.dropped == 2
        # layer 0 is client 1 despite publish order
        np.testing.assert_array_equal(out.probs[:, 0, :], b.probs[:3])
        np.testing.assert_array_equal(out.probs[:, 1, :], a.probs[1:])

    def test_single_contribution(self, rng):
        a = make_contribution(5, [10, 20], random_simplex_rows(rng, 2, 2))
        out = align([a])
        assert out.model_order == (5,)
        assert out.dropped == 0
        np.testing.assert_array_equal(out.probs[:, 0, :], a.probs)

    def test_duplicate_client_rejected(self, rng):
        a = make_contribution(1, [0, 1], random_simplex_rows(rng, 2, 2))
        b = make_contribution(1, [0, 1], random_simplex_rows(rng, 2, 2))
        with pytest.raises(DuplicateClientError):
            align([a, b])

    def test_inconsistent_class_count_rejected(self, rng):
        a = make_contribution(1, [0, 1], random_simplex_rows(rng, 2, 2))
        b = make_contribution(2, [0, 1], random_simplex_rows(rng, 2, 3))
        with pytest.raises(InconsistentCError):
            align([a, b])

    def test_empty_inputs_rejected(self, rng):
        with pytest.raises(EmptyAlignmentError):
            align([])
        a = make_contribution(1, [0, 1], random_simplex_rows(rng, 2, 2))
        b = make_contribution(2, [5, 6], random_simplex_rows(rng, 2, 2))
        with pytest.raises(EmptyAlignmentError):
            align([a, b])


class TestFusion:
    def test_mean_fuse_hand_case(self):
        probs = np.array([
            [[1.0, 0.0], [0.0, 1.0]],
            [[0.5, 0.5], [0.5, 0.5]],
        ])
        aligned = AlignedProbabilities(
            sample_ids=np.array([0, 1], dtype=np.uint64),
            probs=probs, model_order=(1, 2), dropped=0,
        )
        fused = mean_fuse(aligned)
        np.testing.assert_allclose(fused, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)

    def test_uniform_weights_match_mean(self, rng):
        aligned = aligned_fixture(rng, n=9, m=4, c=5)
        uniform = np.full(4, 0.25)
        np.testing.assert_allclose(
            weighted_fuse(aligned, uniform), mean_fuse(aligned), atol=1e-12
        )

    def test_one_hot_weights_reproduce_that_member(self, rng):
        aligned = aligned_fixture(rng, n=7, m=3, c=4)
        w = np.array([0.0, 1.0, 0.0])
        fused = weighted_fuse(aligned, w)
        member = aligned.probs[:, 1, :]
        np.testing.assert_allclose(fused, member, atol=1e-12)
        assert np.array_equal(fused.argmax(axis=1), member.argmax(axis=1))

    def test_fused_rows_are_simplex(self, rng):
        aligned = aligned_fixture(rng, n=20, m=3, c=6)
        for row in mean_fuse(aligned):
            validate_simplex(row)
        w = rng.dirichlet(np.ones(3))
        for row in weighted_fuse(aligned, w):
            validate_simplex(row)

    def test_weight_count_must_match(self, rng):
        aligned = aligned_fixture(rng, n=4, m=3, c=2)
        with pytest.raises(OrderMismatchError):
            weighted_fuse(aligned, np.array([0.5, 0.5]))


class TestAccuracyWeights:
    def test_proportional_to_validation_accuracy(self):
        # model 0 always right, model 1 right on half the samples
        probs = np.array([
            [[0.9, 0.1], [0.9, 0.1]],
            [[0.8, 0.2], [0.2, 0.8]],
        ])
        aligned = AlignedProbabilities(
            sample_ids=np.array([0, 1], dtype=np.uint64),
            probs=probs, model_order=(1, 2), dropped=0,
        )
        w = accuracy_weights(aligned, {0: 0, 1: 0})
        np.testing.assert_allclose(w, [1.0 / 1.5, 0.5 / 1.5])
        assert w.sum() == pytest.approx(1.0)

    def test_all_wrong_falls_back_to_uniform(self):
        probs = np.array([[[0.1, 0.9], [0.2, 0.8]]])
        aligned = AlignedProbabilities(
            sample_ids=np.array([0], dtype=np.uint64),
            probs=probs, model_order=(1, 2), dropped=0,
        )
        w = accuracy_weights(aligned, {0: 0})
        np.testing.assert_allclose(w, [0.5, 0.5])


class TestBuildFeatures:
    def test_reshape_is_lossless(self, rng):
        aligned = aligned_fixture(rng, n=5, m=3, c=4)
        feats = build_features(aligned)
        assert feats.shape == (5, 12)
        np.testing.assert_array_equal(
            feats.reshape(5, 3, 4), aligned.probs
        )

    def test_blocks_follow_model_order(self, rng):
        aligned = aligned_fixture(rng, n=3, m=2, c=3)
        feats = build_features(aligned)
        np.testing.assert_array_equal(feats[:, 0:3], aligned.probs[:, 0, :])
        np.testing.assert_array_equal(feats[:, 3:6], aligned.probs[:, 1, :])


class TestStackingModel:
    def test_blob_round_trip_at_wire_precision(self, rng):
        inner = SoftmaxLinearModel(rng.standard_normal((3, 6)), rng.standard_normal(3))
        model = StackingModel(inner, (2, 7))
        blob = model.to_blob()
        back = StackingModel.from_blob(blob)
        assert back.model_order == (2, 7)
        assert back.n_classes == 3
        np.testing.assert_allclose(
            back.inner.to_vector(),
            inner.to_vector().astype(np.float32).astype(np.float64),
            atol=0,
        )

    def test_blob_length_checked(self, rng):
        inner = SoftmaxLinearModel(rng.standard_normal((2, 4)), rng.standard_normal(2))
        blob = StackingModel(inner, (1, 3)).to_blob()
        with pytest.raises(TruncatedError):
            StackingModel.from_blob(blob[:3])
        with pytest.raises(TruncatedError):
            StackingModel.from_blob(blob[:-2])
        with pytest.raises(TruncatedError):
            StackingModel.from_blob(blob + b"\x00")

    def test_blob_version_checked(self, rng):
        inner = SoftmaxLinearModel(rng.standard_normal((2, 4)), rng.standard_normal(2))
        blob = bytearray(StackingModel(inner, (1, 3)).to_blob())
        blob[0] = 9
        with pytest.raises(WireFormatError):
            StackingModel.from_blob(bytes(blob))

    def test_predict_refuses_reordered_members(self, rng):
        aligned = aligned_fixture(rng, n=4, m=2, c=3)
        inner = SoftmaxLinearModel.zeros(3, 6)
        model = StackingModel(inner, (1, 9))
        with pytest.raises(OrderMismatchError):
            model.predict_proba(aligned)

    def test_inner_width_must_divide(self):
        with pytest.raises(OrderMismatchError):
            StackingModel(SoftmaxLinearModel.zeros(3, 7), (1, 2))


class TestTrainStacking:
    def test_learns_a_separable_meta_problem(self, rng):
        # member 0 is informative, member 1 is noise; rows where member 0
        # leans class 0 truly are class 0
        n = 60
        labels = np.array([i % 2 for i in range(n)])
        lead = np.where(labels[:, None] == 0, [0.9, 0.1], [0.1, 0.9])
        noise = random_simplex_rows(rng, n, 2)
        aligned = AlignedProbabilities(
            sample_ids=np.arange(n, dtype=np.uint64),
            probs=np.stack([lead, noise], axis=1),
            model_order=(1, 2), dropped=0,
        )
        lookup = {i: int(labels[i]) for i in range(n)}
        model = train_stacking(aligned, lookup)
        preds = model.predict_proba(aligned).argmax(axis=1)
        assert np.mean(preds == labels) == 1.0

    def test_single_class_labels_rejected(self, rng):
        aligned = aligned_fixture(rng, n=5, m=2, c=3)
        lookup = {int(s): 1 for s in aligned.sample_ids}
        with pytest.raises(SingleClassError):
            train_stacking(aligned, lookup)

    def test_larger_strength_means_less_shrinkage(self, rng):
        n = 40
        labels = np.array([i % 2 for i in range(n)])
        lead = np.where(labels[:, None] == 0, [0.8, 0.2], [0.2, 0.8])
        aligned = AlignedProbabilities(
            sample_ids=np.arange(n, dtype=np.uint64),
            probs=lead[:, None, :],
            model_order=(1,), dropped=0,
        )
        lookup = {i: int(labels[i]) for i in range(n)}
        tight = train_stacking(aligned, lookup, l2_strength=0.01)
        loose = train_stacking(aligned, lookup, l2_strength=100.0)
        assert (np.linalg.norm(loose.inner.to_vector())
                > np.linalg.norm(tight.inner.to_vector()))
