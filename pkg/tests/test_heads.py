import math

import numpy as np
import pytest

from propgcn.errors import ConfigError, DimensionError
from propgcn.heads import (
    BACKGROUND,
    FOREGROUND,
    INCOMPLETE,
    BatchTargets,
    HeadOutputGrads,
    HeadOutputs,
    HeadParams,
    LossConfig,
    TrainingSample,
    classify_actions,
    heads_backward,
    heads_forward,
    hinge_completeness,
    label_samples,
    multitask_loss,
    multitask_loss_with_grad,
    regress_boundaries,
    score_completeness,
    smooth_l1,
    softmax,
)
from propgcn.intervals import GroundTruthInstance, Interval, Offset


def fixture_batch():
    """One foreground, one incomplete and one background sample over two classes."""
    samples = [
        TrainingSample(0, FOREGROUND, 1, 1, Offset(0.5, -0.2)),
        TrainingSample(1, INCOMPLETE, 2, -1),
        TrainingSample(2, BACKGROUND, 0, -1),
    ]
    outputs = HeadOutputs(
        logits=np.zeros((3, 3)),
        completeness=np.array([[0.0, 9.0], [9.0, 0.5], [9.0, 9.0]]),
        offsets=np.zeros((3, 2, 2)),
    )
    return outputs, BatchTargets.from_samples(samples)


class TestHeads:
    def test_zero_heads_give_uniform_probabilities(self, rng):
        heads = HeadParams.zeros(4, 6, num_classes=3)
        probs = classify_actions(rng.normal(size=(5, 4)), heads)
        np.testing.assert_allclose(probs, 0.25)

    def test_softmax_by_hand(self):
        np.testing.assert_allclose(
            softmax(np.array([10.0, 0.0, 0.0])), [0.99991, 0.0000454, 0.0000454], atol=1e-5
        )

    def test_softmax_is_normalised(self, rng):
        probs = softmax(rng.normal(scale=30, size=(100, 7)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)

    def test_zero_regression_head(self, rng):
        heads = HeadParams.zeros(2, 3, num_classes=2)
        assert not regress_boundaries(rng.normal(size=(4, 3)), heads).any()

    def test_regression_routes_to_class_slot(self):
        heads = HeadParams.zeros(2, 2, num_classes=2)
        heads.regression_w[:, 2:4] = np.eye(2)
        offsets = regress_boundaries(np.array([[0.3, -0.7]]), heads)
        np.testing.assert_allclose(offsets[0, 1], [0.3, -0.7])
        np.testing.assert_array_equal(offsets[0, 0], [0.0, 0.0])

    def test_hand_set_heads(self):
        heads = HeadParams.zeros(2, 2, num_classes=2)
        heads.completeness_w[:] = [[1.0, 2.0], [3.0, 4.0]]
        heads.completeness_b[:] = [0.5, -0.5]
        heads.regression_w[:] = [[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 2.0]]
        f = np.array([[1.0, 1.0]])
        np.testing.assert_allclose(score_completeness(f, heads), [[4.5, 5.5]])
        np.testing.assert_allclose(regress_boundaries(f, heads), [[[1.0, 1.0], [2.0, 2.0]]])

    def test_zero_completeness_head(self, rng):
        heads = HeadParams.zeros(2, 3, num_classes=4)
        assert not score_completeness(rng.normal(size=(2, 3)), heads).any()

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            classify_actions(np.ones((1, 3)), HeadParams.zeros(2, 2, 1))

    def test_head_shapes_must_agree(self):
        with pytest.raises(DimensionError):
            HeadParams(
                np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)), np.zeros(3), np.zeros((2, 4)), np.zeros(4)
            )


class TestScalarLosses:
    @pytest.mark.parametrize("x, expected", [(0.0, 0.0), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5), (-1.0, 0.5)])
    def test_smooth_l1(self, x, expected):
        assert smooth_l1(x) == pytest.approx(expected)

    def test_smooth_l1_continuity(self):
        assert smooth_l1(1.0 - 1e-12) == pytest.approx(smooth_l1(1.0))

    @pytest.mark.parametrize("target, score, expected", [(1, 5.0, 0.0), (1, 0.0, 1.0), (-1, 0.5, 1.5), (1, 1.0, 0.0)])
    def test_hinge(self, target, score, expected):
        assert hinge_completeness(target, score) == pytest.approx(expected)

    def test_vectorised(self):
        np.testing.assert_allclose(smooth_l1(np.array([0.5, -3.0])), [0.125, 2.5])


class TestLabelSamples:
    gts = [GroundTruthInstance(Interval(0, 10), 2), GroundTruthInstance(Interval(40, 50), 1)]

    def test_identical_to_ground_truth(self):
        (sample,) = label_samples([Interval(0, 10)], self.gts)
        assert sample.kind == FOREGROUND
        assert sample.class_target == 2
        assert sample.regression_target == Offset(0.0, 0.0)

    def test_high_tiou_is_foreground(self):
        (sample,) = label_samples([Interval(0, 8)], self.gts)
        assert sample.kind == FOREGROUND
        assert sample.completeness_target == 1

    def test_small_piece_inside_is_incomplete(self):
        (sample,) = label_samples([Interval(0, 3)], self.gts)
        assert sample.kind == INCOMPLETE
        assert sample.class_target == 2
        assert sample.completeness_target == -1
        assert sample.regression_target is None

    def test_disjoint_is_background(self):
        (sample,) = label_samples([Interval(20, 25)], self.gts)
        assert sample.kind == BACKGROUND
        assert sample.class_target == 0

    def test_ambiguous_proposals_are_dropped(self):
        assert label_samples([Interval(0, 5)], self.gts) == []

    def test_activitynet_profile_widens_incomplete(self):
        (sample,) = label_samples([Interval(0, 5)], self.gts, LossConfig.for_profile("activitynet"))
        assert sample.kind == INCOMPLETE

    def test_no_ground_truth(self):
        samples = label_samples([Interval(0, 1), Interval(3, 4)], [])
        assert [s.kind for s in samples] == [BACKGROUND, BACKGROUND]

    def test_ids_follow_positions(self):
        samples = label_samples([Interval(20, 25), Interval(40, 50)], self.gts)
        assert [(s.proposal_id, s.kind) for s in samples] == [(0, BACKGROUND), (1, FOREGROUND)]


class TestLossConfig:
    def test_threshold_ordering(self):
        with pytest.raises(ConfigError):
            LossConfig(incomplete_iou_max=0.8)
        with pytest.raises(ConfigError):
            LossConfig(bg_iou_max=0.5)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            LossConfig.for_profile("kinetics")

    def test_sample_kind_consistency(self):
        with pytest.raises(ConfigError):
            TrainingSample(0, BACKGROUND, 3, -1)
        with pytest.raises(ConfigError):
            TrainingSample(0, FOREGROUND, 1, 1)


class TestMultitaskLoss:
    def test_perfect_predictions(self):
        samples = [
            TrainingSample(0, FOREGROUND, 1, 1, Offset(0.1, 0.2)),
            TrainingSample(1, INCOMPLETE, 2, -1),
            TrainingSample(2, BACKGROUND, 0, -1),
        ]
        logits = np.full((3, 3), -50.0)
        logits[[0, 1, 2], [1, 2, 0]] = 50.0
        offsets = np.zeros((3, 2, 2))
        offsets[0, 0] = [0.1, 0.2]
        outputs = HeadOutputs(logits, np.array([[1.0, 0.0], [0.0, -1.0], [0.0, 0.0]]), offsets)
        loss = multitask_loss(outputs, BatchTargets.from_samples(samples))
        assert loss.total == pytest.approx(0.0, abs=1e-12)
        assert loss.correct == 3

    def test_background_only_is_cross_entropy(self, rng):
        samples = [TrainingSample(i, BACKGROUND, 0, -1) for i in range(4)]
        outputs = HeadOutputs(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2, 2)))
        loss = multitask_loss(outputs, BatchTargets.from_samples(samples))
        assert loss.reg == 0.0 and loss.com == 0.0
        assert loss.total == loss.ce

    def test_hand_fixture(self):
        outputs, targets = fixture_batch()
        loss = multitask_loss(outputs, targets)
        assert loss.ce == pytest.approx(3 * math.log(3))
        assert loss.reg == pytest.approx(0.125 + 0.02)
        assert loss.com == pytest.approx(1.0 + 1.5)
        assert loss.total == pytest.approx(3 * math.log(3) + 0.5 * 0.145 + 0.5 * 2.5)

    def test_non_target_slots_are_ignored(self):
        outputs, targets = fixture_batch()
        before = multitask_loss(outputs, targets).total
        outputs.offsets[0, 1] = [7.0, -3.0]
        outputs.completeness[0, 1] = -4.0
        assert multitask_loss(outputs, targets).total == before

    def test_non_negative(self, rng):
        samples = [
            TrainingSample(0, FOREGROUND, 2, 1, Offset(-0.3, 0.1)),
            TrainingSample(1, INCOMPLETE, 1, -1),
        ]
        for _ in range(20):
            outputs = HeadOutputs(rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 2)))
            assert multitask_loss(outputs, BatchTargets.from_samples(samples)).total >= 0.0

    def test_empty_batch(self):
        with pytest.raises(ConfigError):
            multitask_loss(HeadOutputs(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 1, 2))), BatchTargets.from_samples([]))

    def test_gradient_matches_finite_differences(self, rng):
        samples = [
            TrainingSample(0, FOREGROUND, 1, 1, Offset(0.4, -0.1)),
            TrainingSample(1, FOREGROUND, 2, 1, Offset(-1.5, 0.3)),
            TrainingSample(2, INCOMPLETE, 2, -1),
            TrainingSample(3, BACKGROUND, 0, -1),
        ]
        targets = BatchTargets.from_samples(samples)
        outputs = HeadOutputs(
            rng.normal(size=(4, 3)),
            rng.uniform(-0.8, 0.8, size=(4, 2)),
            rng.normal(size=(4, 2, 2)),
        )
        _, grads = multitask_loss_with_grad(outputs, targets)

        h = 1e-6
        for name in ("logits", "completeness", "offsets"):
            array = getattr(outputs, name)
            numeric = np.zeros_like(array)
            for idx in np.ndindex(array.shape):
                saved = array[idx]
                array[idx] = saved + h
                up = multitask_loss(outputs, targets).total
                array[idx] = saved - h
                down = multitask_loss(outputs, targets).total
                array[idx] = saved
                numeric[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(getattr(grads, name), numeric, rtol=1e-4, atol=1e-7)


def test_heads_backward_matches_finite_differences(rng):
    heads = HeadParams.initialize(3, 4, 2, rng)
    h1, h2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    upstream = HeadOutputGrads(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2, 2)))

    def objective():
        out = heads_forward(h1, h2, heads)
        return (
            np.sum(upstream.logits * out.logits)
            + np.sum(upstream.completeness * out.completeness)
            + np.sum(upstream.offsets * out.offsets)
        )

    param_grads, d_h1, d_h2 = heads_backward(h1, h2, heads, upstream)
    h = 1e-6
    targets = [(f"heads.{k}", v) for k, v in vars(heads).items()] + [("h1", h1), ("h2", h2)]
    analytic = {**param_grads, "h1": d_h1, "h2": d_h2}
    for name, array in targets:
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            saved = array[idx]
            array[idx] = saved + h
            up = objective()
            array[idx] = saved - h
            down = objective()
            array[idx] = saved
            numeric[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic[name], numeric, rtol=1e-5, atol=1e-7)
