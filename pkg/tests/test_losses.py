"""Loss functions against hand-computed values, and target assignment."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvkit import tensor as T
from pvkit.geometry import Box3D, encode_residual
from pvkit.losses import (
    assign_anchor_targets,
    assign_roi_targets,
    focal_loss,
    orientation_loss,
    refinement_cls_loss,
    rpn_loss,
    smooth_l1,
    soft_label,
)


class TestFocalLoss:
    def test_single_positive_frozen_value(self):
        # -0.25 * (1 - 0.9)^2 * ln(0.9)
        out = focal_loss(T.constant(np.array([0.9])), np.array([1]))
        np.testing.assert_allclose(out.data, 0.00026340128914456557, rtol=1e-12)

    def test_mixed_batch_frozen_value(self):
        probs = T.constant(np.array([0.9, 0.2, 0.7, 0.4]))
        labels = np.array([1, 0, -1, 1])  # p_t = 0.9, 0.8, (ignored), 0.4
        out = focal_loss(probs, labels)
        np.testing.assert_allclose(out.data, 0.02832033422365354, rtol=1e-12)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            probs = rng.uniform(0.01, 0.99, n)
            labels = rng.choice([-1, 0, 1], size=n)
            alpha, gamma = rng.uniform(0.1, 0.9), rng.uniform(0.5, 3.0)
            got = focal_loss(T.constant(probs), labels, alpha=alpha, gamma=gamma).data
            keep = labels >= 0
            if not keep.any():
                assert got == 0.0
                continue
            p_t = np.where(labels[keep] == 1, probs[keep], 1.0 - probs[keep])
            want = (-alpha * (1 - p_t) ** gamma * np.log(p_t)).mean()
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_all_ignored_gives_zero(self):
        out = focal_loss(T.constant(np.array([0.5, 0.5])), np.array([-1, -1]))
        assert out.data == 0.0

    def test_gamma_zero_is_weighted_bce(self):
        probs = np.array([0.7, 0.3])
        labels = np.array([1, 0])
        got = focal_loss(T.constant(probs), labels, alpha=0.5, gamma=0.0).data
        want = (-0.5 * np.log([0.7, 0.7])).mean()
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_easy_examples_are_downweighted(self):
        easy = focal_loss(T.constant(np.array([0.99])), np.array([1])).data
        hard = focal_loss(T.constant(np.array([0.5])), np.array([1])).data
        bce_ratio = np.log(0.99) / np.log(0.5)
        assert easy / hard < abs(bce_ratio) / 100.0

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            focal_loss(T.constant(np.ones((2, 2))), np.array([1, 0]))


class TestSmoothL1:
    def test_quadratic_region(self):
        out = smooth_l1(T.constant(np.array([0.5])), np.array([0.0]))
        np.testing.assert_allclose(out.data, 0.125, rtol=1e-12)

    def test_linear_region(self):
        out = smooth_l1(T.constant(np.array([2.0])), np.array([0.0]))
        np.testing.assert_allclose(out.data, 1.5, rtol=1e-12)

    def test_rows_sum_then_mean(self):
        pred = np.array([[0.5, 2.0], [0.0, 0.0]])
        out = smooth_l1(T.constant(pred), np.zeros((2, 2)))
        np.testing.assert_allclose(out.data, (0.125 + 1.5) / 2.0, rtol=1e-12)

    def test_continuous_at_elbow(self):
        below = smooth_l1(T.constant(np.array([1.0 - 1e-9])), np.array([0.0])).data
        above = smooth_l1(T.constant(np.array([1.0 + 1e-9])), np.array([0.0])).data
        assert abs(below - above) < 1e-8

    def test_empty_is_zero(self):
        out = smooth_l1(T.constant(np.empty((0, 7))), np.empty((0, 7)))
        assert out.data == 0.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            smooth_l1(T.constant(np.ones(3)), np.ones(4))


class TestOrientationLoss:
    def test_frozen_values(self):
        out = orientation_loss(T.constant(np.array([[1.0, 0.0]])), np.array([0]))
        np.testing.assert_allclose(out.data, 0.31326168751822286, rtol=1e-12)
        out = orientation_loss(T.constant(np.array([[2.0, -1.0]])), np.array([1]))
        np.testing.assert_allclose(out.data, 3.048587351573742, rtol=1e-12)

    def test_uniform_logits_give_ln2(self):
        out = orientation_loss(T.constant(np.zeros((4, 2))), np.zeros(4, dtype=int))
        np.testing.assert_allclose(out.data, np.log(2.0), rtol=1e-12)

    def test_empty_is_zero(self):
        out = orientation_loss(T.constant(np.empty((0, 2))), np.empty(0, dtype=int))
        assert out.data == 0.0

    def test_large_logits_stay_finite(self):
        out = orientation_loss(T.constant(np.array([[500.0, -500.0]])), np.array([0]))
        assert np.isfinite(out.data)
        assert out.data >= 0.0

    def test_wrong_width_raises(self):
        with pytest.raises(ValueError):
            orientation_loss(T.constant(np.ones((2, 3))), np.array([0, 1]))


def test_rpn_loss_composition():
    out = rpn_loss(T.constant(1.0), T.constant(0.5), T.constant(0.25), beta=2.0)
    np.testing.assert_allclose(out.data, 2.5, rtol=1e-12)
    out = rpn_loss(T.constant(1.0), T.constant(0.5), T.constant(0.25), beta=0.0)
    np.testing.assert_allclose(out.data, 1.0, rtol=1e-12)


class TestSoftLabel:
    def test_default_band_endpoints(self):
        assert soft_label(0.25) == 0.0
        assert soft_label(0.75) == 1.0
        assert abs(soft_label(0.5) - 0.5) <= 1e-12

    def test_clamps_outside_band(self):
        assert soft_label(0.0) == 0.0
        assert soft_label(0.05) == 0.0
        assert soft_label(0.9) == 1.0
        assert soft_label(1.0) == 1.0

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert soft_label(lo) <= soft_label(hi)

    def test_custom_band(self):
        assert soft_label(0.2, sigma_bg=0.2, sigma_fg=0.6) == 0.0
        assert soft_label(0.6, sigma_bg=0.2, sigma_fg=0.6) == 1.0
        np.testing.assert_allclose(soft_label(0.4, sigma_bg=0.2, sigma_fg=0.6), 0.5)

    def test_array_input(self):
        out = soft_label(np.array([0.1, 0.5, 0.9]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_inverted_band_rejected(self):
        with pytest.raises(ValueError):
            soft_label(0.5, sigma_bg=0.75, sigma_fg=0.25)


class TestRefinementClsLoss:
    def test_frozen_value(self):
        out = refinement_cls_loss(T.constant(np.array([0.6])), np.array([0.3]))
        np.testing.assert_allclose(out.data, 0.7946511994417057, rtol=1e-12)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, 16)
        y = rng.uniform(0.0, 1.0, 16)
        got = refinement_cls_loss(T.constant(p), y).data
        want = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_saturated_predictions_stay_finite(self):
        out = refinement_cls_loss(T.constant(np.array([0.0, 1.0])), np.array([0.0, 1.0]))
        assert np.isfinite(out.data)

    def test_perfect_hard_predictions_near_zero(self):
        out = refinement_cls_loss(T.constant(np.array([1e-7, 1.0 - 1e-7])),
                                  np.array([0.0, 1.0]))
        assert out.data < 1e-6

    def test_empty_is_zero(self):
        assert refinement_cls_loss(T.constant(np.empty(0)), np.empty(0)).data == 0.0


def make_anchor_row(x, y, cls_sizes, theta=0.0):
    h, w, l = cls_sizes
    return Box3D(x, y, 0.0, h, w, l, theta)


CAR = (1.56, 1.6, 3.9)


class TestAnchorAssignment:
    def test_exact_overlap_is_positive(self):
        anchors = [make_anchor_row(0, 0, CAR), make_anchor_row(20, 0, CAR)]
        gts = [make_anchor_row(0, 0, CAR)]
        out = assign_anchor_targets(anchors, np.zeros(2, int), gts, np.zeros(1, int),
                                    iou_pos=0.6, iou_neg=0.3)
        assert out.labels[0] == 1
        assert out.labels[1] == 0
        assert out.matched_gt[0] == 0
        np.testing.assert_allclose(out.max_iou[0], 1.0, atol=1e-12)
        np.testing.assert_allclose(out.residuals[0], np.zeros(7), atol=1e-12)

    def test_band_between_thresholds_is_ignored(self):
        anchors = [make_anchor_row(0, 0, CAR), make_anchor_row(1.3, 0, CAR),
                   make_anchor_row(20, 0, CAR)]
        gts = [make_anchor_row(0, 0, CAR)]
        out = assign_anchor_targets(anchors, np.zeros(3, int), gts, np.zeros(1, int),
                                    iou_pos=0.9, iou_neg=0.2)
        # anchor 1 overlaps partially: inside the ignore band; anchor 0 is
        # the forced best match despite sitting under iou_pos
        assert out.labels[0] == 1
        assert out.labels[1] == -1
        assert out.labels[2] == 0

    def test_every_gt_forces_a_positive(self):
        rng = np.random.default_rng(2)
        anchors = [make_anchor_row(x, y, CAR, theta)
                   for x in np.arange(0, 12, 3.0) for y in np.arange(-6, 6, 3.0)
                   for theta in (0.0, np.pi / 2)]
        classes = np.zeros(len(anchors), int)
        for _ in range(20):
            gts = [Box3D(rng.uniform(0, 11), rng.uniform(-5, 5), 0.0, *CAR,
                         rng.uniform(-np.pi / 4, np.pi / 4))]
            out = assign_anchor_targets(anchors, classes, gts, np.zeros(1, int),
                                        iou_pos=0.999, iou_neg=0.1)
            assert len(out.pos_indices) >= 1
            assert (out.matched_gt[out.pos_indices] == 0).all()

    def test_forced_match_prefers_lowest_index_on_tie(self):
        # two identical anchors: the tie must go to index 0
        anchors = [make_anchor_row(0, 0, CAR), make_anchor_row(0, 0, CAR)]
        gts = [make_anchor_row(0.5, 0, CAR)]
        out = assign_anchor_targets(anchors, np.zeros(2, int), gts, np.zeros(1, int),
                                    iou_pos=0.99, iou_neg=0.1)
        assert out.labels[0] == 1
        assert out.labels[1] == -1  # same overlap, inside the ignore band

    def test_class_mismatch_never_matches(self):
        anchors = [make_anchor_row(0, 0, CAR)]
        gts = [make_anchor_row(0, 0, CAR)]
        out = assign_anchor_targets(anchors, np.array([1]), gts, np.array([0]),
                                    iou_pos=0.5, iou_neg=0.2)
        assert out.labels[0] == 0
        assert len(out.pos_indices) == 0

    def test_distant_gt_falls_back_to_nearest_anchor(self):
        anchors = [make_anchor_row(0, 0, CAR), make_anchor_row(6, 0, CAR)]
        gts = [make_anchor_row(30.0, 0, CAR)]  # overlaps nothing
        out = assign_anchor_targets(anchors, np.zeros(2, int), gts, np.zeros(1, int))
        assert out.labels[1] == 1
        assert out.matched_gt[1] == 0

    def test_residuals_match_encoder(self):
        anchor = make_anchor_row(0, 0, CAR)
        gt = Box3D(0.8, -0.4, 0.1, 1.6, 1.7, 4.1, 0.12)
        out = assign_anchor_targets([anchor], np.zeros(1, int), [gt], np.zeros(1, int),
                                    iou_pos=0.3, iou_neg=0.1)
        np.testing.assert_allclose(
            out.residuals[0], encode_residual(gt, anchor).to_array(), atol=1e-12)

    def test_orientation_bins(self):
        anchors = [make_anchor_row(0, 0, CAR, theta=0.0),
                   make_anchor_row(10, 0, CAR, theta=0.0)]
        gts = [Box3D(0, 0, 0, *CAR, 0.3), Box3D(10, 0, 0, *CAR, np.pi - 0.1)]
        out = assign_anchor_targets(anchors, np.zeros(2, int), gts,
                                    np.zeros(2, int), iou_pos=0.3, iou_neg=0.1)
        rows = {int(i): b for i, b in zip(out.pos_indices, out.ori_bins)}
        assert rows[0] == 0  # roughly facing the anchor
        assert rows[1] == 1  # roughly opposing it


class TestRoIAssignment:
    def test_full_pipeline_consistency(self):
        rois = [Box3D(0, 0, 0, *CAR, 0.0),        # exact hit
                Box3D(0.9, 0.4, 0, *CAR, 0.1),    # partial
                Box3D(15, 0, 0, *CAR, 0.0)]       # background
        gts = [Box3D(0, 0, 0, *CAR, 0.0)]
        out = assign_roi_targets(rois, np.zeros(3, int), gts, np.zeros(1, int),
                                 sigma_bg=0.25, sigma_fg=0.75, reg_min_iou=0.55)
        np.testing.assert_allclose(out.iou[0], 1.0, atol=1e-12)
        assert out.soft[0] == 1.0
        assert out.soft[2] == 0.0
        assert out.matched_gt[2] == -1
        assert out.reg_mask[0]
        assert not out.reg_mask[2]
        np.testing.assert_array_equal(out.residuals[2], np.zeros(7))
        np.testing.assert_allclose(
            out.residuals[1], encode_residual(gts[0], rois[1]).to_array(), atol=1e-12)

    def test_soft_targets_follow_linear_band(self):
        rois = [Box3D(0.975, 0, 0, *CAR, 0.0)]
        gts = [Box3D(0, 0, 0, *CAR, 0.0)]
        out = assign_roi_targets(rois, np.zeros(1, int), gts, np.zeros(1, int),
                                 sigma_bg=0.25, sigma_fg=0.75)
        np.testing.assert_allclose(out.soft[0], soft_label(out.iou[0]), atol=1e-12)
        assert 0.0 < out.soft[0] < 1.0

    def test_reg_mask_requires_match_and_overlap(self):
        rois = [Box3D(0, 0, 0, *CAR, 0.0)]
        gts = [Box3D(0, 0, 0, *CAR, 0.0)]
        out = assign_roi_targets(rois, np.zeros(1, int), gts, np.ones(1, int))
        assert not out.reg_mask[0]  # class mismatch: no match, no regression

    def test_best_gt_wins(self):
        rois = [Box3D(2.0, 0, 0, *CAR, 0.0)]
        gts = [Box3D(0, 0, 0, *CAR, 0.0), Box3D(2.2, 0, 0, *CAR, 0.0)]
        out = assign_roi_targets(rois, np.zeros(1, int), gts, np.zeros(2, int))
        assert out.matched_gt[0] == 1

    def test_empty_rois(self):
        out = assign_roi_targets([], np.empty(0, int), [Box3D(0, 0, 0, *CAR, 0)],
                                 np.zeros(1, int))
        assert len(out.iou) == 0
        assert out.residuals.shape == (0, 7)
