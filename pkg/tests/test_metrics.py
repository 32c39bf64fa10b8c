import time

import numpy as np
import pytest

from fusionseg.cloud import CLASS_NAMES, UNLABELED
from fusionseg.metrics import (ConfusionMatrix, accuracies, confusion,
                               iou_per_class, mean_iou_of, measure_latency,
                               miou, report)


class TestConfusion:
    def test_hand_counts(self):
        m = confusion(pred=[1, 1, 2, 0], truth=[1, 2, 2, 0], num_classes=3)
        expected = np.array([[1, 0, 0],
                             [0, 1, 0],
                             [0, 1, 1]])
        np.testing.assert_array_equal(m.counts, expected)

    def test_rows_are_truth(self):
        m = confusion(pred=[2], truth=[0], num_classes=3)
        assert m.counts[0, 2] == 1 and m.counts[2, 0] == 0

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 8, size=500)
        truth = rng.integers(0, 8, size=500)
        m = confusion(pred, truth)
        manual = np.zeros((8, 8), dtype=np.int64)
        for p, t in zip(pred, truth):
            manual[t, p] += 1
        np.testing.assert_array_equal(m.counts, manual)

    def test_merge_is_addition(self):
        a = confusion([0, 1], [0, 1], num_classes=2)
        b = confusion([1, 1], [0, 1], num_classes=2)
        np.testing.assert_array_equal(a.merge(b).counts, a.counts + b.counts)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion([8], [0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [0])


class TestIoU:
    def test_perfect(self):
        m = confusion([0, 1, 2], [0, 1, 2], num_classes=3)
        iou, present = iou_per_class(m)
        np.testing.assert_array_equal(iou, [1, 1, 1])
        assert present.all()

    def test_hand_computed(self):
        # class 0: TP=1 FP=1 FN=1 -> 1/3; class 1: TP=1 FP=1 FN=1 -> 1/3
        m = confusion(pred=[0, 0, 1, 1], truth=[0, 1, 0, 1], num_classes=2)
        iou, _ = iou_per_class(m)
        np.testing.assert_allclose(iou, [1 / 3, 1 / 3])

    def test_absent_class_flagged_and_excluded(self):
        m = confusion(pred=[0, 0], truth=[0, 0], num_classes=3)
        iou, present = iou_per_class(m)
        assert not present[1] and not present[2]
        assert miou(m) == 1.0  # absent classes skipped, not scored zero

    def test_predicted_only_counts_as_present(self):
        m = confusion(pred=[1], truth=[0], num_classes=3)
        _, present = iou_per_class(m)
        assert present[1]  # FP makes the union non-empty

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 8, size=400)
        truth = rng.integers(0, 8, size=400)
        m = confusion(pred, truth)
        iou, _ = iou_per_class(m)
        for c in range(8):
            tp = int(np.sum((pred == c) & (truth == c)))
            fp = int(np.sum((pred == c) & (truth != c)))
            fn = int(np.sum((pred != c) & (truth == c)))
            assert iou[c] == pytest.approx(tp / (tp + fp + fn))

    def test_transpose_invariant(self):
        # IoU is symmetric in prediction/truth: union and intersection are
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 5, size=200)
        truth = rng.integers(0, 5, size=200)
        a, _ = iou_per_class(confusion(pred, truth, num_classes=5))
        b, _ = iou_per_class(confusion(truth, pred, num_classes=5))
        np.testing.assert_allclose(a, b)

    def test_duplication_invariant(self):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 5, size=100)
        truth = rng.integers(0, 5, size=100)
        a, _ = iou_per_class(confusion(pred, truth, num_classes=5))
        b, _ = iou_per_class(confusion(np.tile(pred, 3), np.tile(truth, 3),
                                       num_classes=5))
        np.testing.assert_allclose(a, b)

    def test_miou_include_subset(self):
        m = confusion(pred=[0, 0, 1, 1], truth=[0, 1, 0, 1], num_classes=3)
        assert miou(m, include=[0]) == pytest.approx(1 / 3)

    def test_miou_all_absent(self):
        with pytest.raises(ValueError):
            miou(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_published_per_class_mean(self):
        ious = [0.955, 0.943, 0.974, 0.947, 0.978, 0.923, 0.922]
        assert mean_iou_of(ious) == pytest.approx(0.9488571, abs=1e-6)


class TestAccuracies:
    def test_hand_computed(self):
        m = confusion(pred=[0, 0, 1, 1, 1, 1], truth=[0, 1, 1, 1, 1, 0],
                      num_classes=2)
        overall, per_class = accuracies(m)
        assert overall == pytest.approx(4 / 6)
        # recalls: class 0 -> 1/2, class 1 -> 3/4
        assert per_class == pytest.approx((0.5 + 0.75) / 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracies(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


class TestReport:
    def _mixed_matrix(self):
        rng = np.random.default_rng(4)
        pred = rng.integers(0, 8, size=600)
        truth = rng.integers(0, 8, size=600)
        return confusion(pred, truth)

    def test_seven_class_drops_unlabeled_truth(self):
        m = self._mixed_matrix()
        rep = report(m, classes=7)
        assert CLASS_NAMES[UNLABELED] not in rep.evaluated_classes
        assert len(rep.evaluated_classes) == 7

    def test_eight_class_keeps_all(self):
        rep = report(self._mixed_matrix(), classes=8)
        assert len(rep.evaluated_classes) == 8

    def test_seven_class_matches_manual_zeroing(self):
        m = self._mixed_matrix()
        rep = report(m, classes=7)
        sub = m.counts.copy()
        sub[UNLABELED, :] = 0
        iou, _ = iou_per_class(ConfusionMatrix(sub))
        expected = iou[1:].mean()
        assert rep.miou == pytest.approx(expected)

    def test_bad_class_count(self):
        with pytest.raises(ValueError):
            report(self._mixed_matrix(), classes=6)

    def test_json_round_trip(self):
        import json
        rep = report(self._mixed_matrix(), classes=8)
        data = json.loads(rep.to_json())
        assert data["overall_accuracy"] == rep.overall_accuracy
        assert set(data["per_class_iou"]) == set(rep.per_class_iou)


class TestLatency:
    def test_sleep_oracle(self):
        stages = {"a": lambda x: time.sleep(0.02) or x,
                  "b": lambda x: x}
        stats = measure_latency(stages, frames=[0, 1, 2])
        summary = stats.summary()
        assert summary["a"]["frames"] == 3
        assert summary["a"]["mean"] >= 0.02
        assert summary["b"]["mean"] < 0.02
        assert summary["total"]["mean"] >= summary["a"]["mean"]

    def test_stage_chaining(self):
        seen = []
        stages = {"double": lambda x: x * 2,
                  "record": lambda x: seen.append(x) or x}
        measure_latency(stages, frames=[1, 2])
        assert seen == [2, 4]

    def test_no_frames(self):
        with pytest.raises(ValueError):
            measure_latency({"a": lambda x: x}, frames=[])
