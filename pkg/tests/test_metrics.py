"""Metric engines against brute-force counting oracles."""

import time

import numpy as np
import pytest

from hierseg.errors import ShapeError, ValidationError
from hierseg.metrics import (
    ConfusionMatrix,
    StageTimer,
    average_precision,
    image_level_metrics,
    max_pool_scores,
)


def brute_force_iou(pred, gt, num_labels, ignore=255):
    """Set-arithmetic oracle: per-class IoU by explicit pixel sets."""
    ious = {}
    valid = gt != ignore
    for c in range(num_labels):
        pred_set = set(zip(*np.nonzero((pred == c) & valid)))
        gt_set = set(zip(*np.nonzero((gt == c) & valid)))
        union = pred_set | gt_set
        if union:
            ious[c] = len(pred_set & gt_set) / len(union)
    return ious


class TestConfusionMatrix:
    def test_perfect_prediction_scores_one(self):
        gt = np.array([[0, 1], [1, 0]])
        cm = ConfusionMatrix(2).update(gt, gt)
        assert cm.miou() == 1.0

    def test_disjoint_prediction_scores_zero(self):
        gt = np.zeros((4, 4), dtype=int)
        pred = np.ones((4, 4), dtype=int)
        cm = ConfusionMatrix(2).update(pred, gt)
        iou = cm.per_class_iou()
        assert iou[0] == 0.0

    def test_matches_set_arithmetic_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = rng.integers(0, 3, size=(8, 8))
            gt = rng.integers(0, 3, size=(8, 8))
            cm = ConfusionMatrix(3).update(pred, gt)
            oracle = brute_force_iou(pred, gt, 3)
            ours = cm.per_class_iou()
            for c, v in oracle.items():
                assert ours[c] == pytest.approx(v, abs=1e-12)

    def test_ignore_pixels_never_counted(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = rng.integers(0, 3, size=(6, 6))
            gt = rng.integers(0, 3, size=(6, 6))
            gt[rng.random((6, 6)) < 0.3] = 255
            cm = ConfusionMatrix(3).update(pred, gt)
            assert cm.total_pixels == int((gt != 255).sum())

    def test_accumulation_is_order_independent(self):
        rng = np.random.default_rng(2)
        pairs = [
            (rng.integers(0, 4, size=(5, 5)), rng.integers(0, 4, size=(5, 5)))
            for _ in range(6)
        ]
        forward = ConfusionMatrix(4)
        backward = ConfusionMatrix(4)
        for p, g in pairs:
            forward.update(p, g)
        for p, g in reversed(pairs):
            backward.update(p, g)
        np.testing.assert_array_equal(forward.counts, backward.counts)

    def test_merge_equals_joint_accumulation(self):
        rng = np.random.default_rng(3)
        a, b = ConfusionMatrix(3), ConfusionMatrix(3)
        joint = ConfusionMatrix(3)
        for cm in (a, b):
            p = rng.integers(0, 3, size=(4, 4))
            g = rng.integers(0, 3, size=(4, 4))
            cm.update(p, g)
            joint.update(p, g)
        np.testing.assert_array_equal(a.merge(b).counts, joint.counts)

    def test_mean_covers_only_gt_present_classes(self):
        # Class 2 never occurs in ground truth: it must not enter the mean.
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 2], [1, 2]])
        cm = ConfusionMatrix(3).update(pred, gt)
        assert cm.miou() == pytest.approx(0.5)

    def test_shape_and_range_validation(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ShapeError):
            cm.update(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            cm.update(np.full((2, 2), 7), np.zeros((2, 2)))
        with pytest.raises(ValidationError):
            ConfusionMatrix(0)

    def test_miou_needs_ground_truth(self):
        with pytest.raises(ValidationError):
            ConfusionMatrix(2).miou()


class TestAveragePrecision:
    def test_perfect_separation_is_one(self):
        scores = np.array([0.9, 0.8, 0.7, 0.2, 0.1])
        positives = np.array([True, True, True, False, False])
        assert average_precision(scores, positives) == 1.0

    def test_hand_built_step_interpolation(self):
        # Ranking: pos, neg, pos, neg. Precision at the positive hits is
        # 1/1 and 2/3, so AP = (1 + 2/3) / 2.
        scores = np.array([0.9, 0.8, 0.7, 0.6])
        positives = np.array([True, False, True, False])
        assert average_precision(scores, positives) == pytest.approx(5 / 6)

    def test_all_negatives_rejected(self):
        with pytest.raises(ValidationError):
            average_precision(np.array([0.5]), np.array([False]))


class TestImageLevelMetrics:
    def test_single_image_single_class_perfect(self):
        report = image_level_metrics(np.array([[0.9]]), np.array([[True]]),
                                     threshold=0.5)
        assert report.map_score == 1.0
        assert report.precision == 1.0
        assert report.recall == 1.0
        assert report.f1 == 1.0

    def test_four_image_two_class_hand_table(self):
        # Class 0 ranking: images 0, 1 positive with top-2 scores -> AP 1.
        # Class 1 ranking: scores (.9, .6, .8, .3), positives at images
        # 0 and 3 -> hits at ranks 1 and 4 -> AP = (1 + 2/4) / 2 = 0.75.
        scores = np.array([
            [0.9, 0.9],
            [0.8, 0.6],
            [0.3, 0.8],
            [0.2, 0.3],
        ])
        presence = np.array([
            [True, True],
            [True, False],
            [False, False],
            [False, True],
        ])
        report = image_level_metrics(scores, presence, threshold=0.5)
        assert report.per_class_ap["0"] == pytest.approx(1.0)
        assert report.per_class_ap["1"] == pytest.approx(0.75)
        assert report.map_score == pytest.approx(0.875)
        # Decisions at 0.5: five predicted pairs, three of them true
        # (img0 both, img1 c0), false positives img1 c1? no: 0.6 >= 0.5 yes.
        # tp = {0c0, 0c1, 1c0}, fp = {1c1, 2c1}, fn = {3c1}.
        assert report.precision == pytest.approx(3 / 5)
        assert report.recall == pytest.approx(3 / 4)

    def test_threshold_minus_infinity_gives_full_recall(self):
        rng = np.random.default_rng(4)
        scores = rng.random((6, 3))
        presence = rng.random((6, 3)) < 0.5
        presence[0, 0] = True
        report = image_level_metrics(scores, presence, threshold=-np.inf)
        assert report.recall == 1.0

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValidationError):
            image_level_metrics(np.zeros((0, 2)), np.zeros((0, 2), dtype=bool))


class TestMaxPool:
    def test_picks_spatial_maximum_per_class(self):
        rng = np.random.default_rng(5)
        grid = rng.standard_normal((3, 4, 5))
        pooled = max_pool_scores(grid)
        for c in range(5):
            assert pooled[c] == grid[:, :, c].max()

    def test_rejects_flat_input(self):
        with pytest.raises(ShapeError):
            max_pool_scores(np.zeros((3, 4)))


class TestStageTimer:
    def test_sleep_stage_reports_at_least_sleep_time(self):
        timer = StageTimer()
        with timer.stage("encoder"):
            time.sleep(0.01)
        assert timer.medians()["encoder"] >= 10.0

    def test_nested_total_bounds_inner_stage(self):
        timer = StageTimer()
        with timer.stage("total"):
            with timer.stage("inner"):
                time.sleep(0.005)
        assert timer.medians()["total"] >= timer.medians()["inner"]

    def test_repeat_runs_have_stable_medians(self):
        def run():
            t = StageTimer()
            for _ in range(5):
                with t.stage("work"):
                    time.sleep(0.01)
            return t.medians()["work"]

        a, b = run(), run()
        assert abs(a - b) / max(a, b) < 0.5

    def test_merge_concatenates_samples(self):
        a, b = StageTimer(), StageTimer()
        with a.stage("s"):
            pass
        with b.stage("s"):
            pass
        assert len(a.merge(b).durations_ms["s"]) == 2
