import csv

import numpy as np
import pytest

from labelprop.core.exceptions import DimensionMismatchError, EmptyEvaluationError, LabelRangeError
from labelprop.imagery import VOID, LabelMap
from labelprop.metrics import (
    ConfusionMatrix,
    accumulate,
    average_iou,
    class_iou,
    format_table,
    mean_iou,
    merge,
    write_report,
    write_table,
)


def _labels(rows, num_classes=2):
    return LabelMap(np.array(rows, dtype=np.uint8), num_classes)


class TestConfusion:
    def test_hand_counted_matrix(self):
        gt = _labels([[0, 0, 0, 0], [1, 1, 1, 1]])
        pred = _labels([[0, 0, 0, 1], [0, 0, 1, 1]])
        conf = accumulate(ConfusionMatrix.empty(2), pred, gt)
        assert conf.counts.tolist() == [[3, 1], [2, 2]]
        assert conf.total == 8

    def test_void_ground_truth_not_scored(self):
        gt = _labels([[0, VOID], [1, VOID]])
        pred = _labels([[0, 1], [1, 0]])
        assert accumulate(ConfusionMatrix.empty(2), pred, gt).total == 2

    def test_void_prediction_rejected(self):
        gt = _labels([[0, 1]])
        with pytest.raises(LabelRangeError):
            accumulate(ConfusionMatrix.empty(2), _labels([[0, VOID]]), gt)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            accumulate(ConfusionMatrix.empty(2), _labels([[0, 1]]), _labels([[0], [1]]))

    def test_merge_is_addition(self, rng):
        a = ConfusionMatrix(rng.integers(0, 5, size=(3, 3)))
        b = ConfusionMatrix(rng.integers(0, 5, size=(3, 3)))
        np.testing.assert_array_equal(merge(a, b).counts, a.counts + b.counts)
        with pytest.raises(DimensionMismatchError):
            merge(a, ConfusionMatrix.empty(2))

    def test_accumulating_frames_equals_merging(self, rng):
        total = ConfusionMatrix.empty(3)
        merged = ConfusionMatrix.empty(3)
        for _ in range(5):
            gt = _labels(rng.integers(0, 3, size=(4, 4)), 3)
            pred = _labels(rng.integers(0, 3, size=(4, 4)), 3)
            total = accumulate(total, pred, gt)
            merged = merge(merged, accumulate(ConfusionMatrix.empty(3), pred, gt))
        assert total == merged


class TestIou:
    def test_two_class_oracle(self):
        ious = class_iou(ConfusionMatrix([[3, 1], [2, 4]]))
        assert ious[0] == pytest.approx(3 / 6)
        assert ious[1] == pytest.approx(4 / 7)

    def test_matches_set_definition_on_random_maps(self, rng):
        for _ in range(20):
            gt = rng.integers(0, 3, size=(4, 4))
            pred = rng.integers(0, 3, size=(4, 4))
            conf = accumulate(ConfusionMatrix.empty(3), _labels(pred, 3), _labels(gt, 3))
            for cls, iou in enumerate(class_iou(conf)):
                union = np.count_nonzero((gt == cls) | (pred == cls))
                if union == 0:
                    assert iou is None
                else:
                    assert iou == pytest.approx(np.count_nonzero((gt == cls) & (pred == cls)) / union)

    def test_absent_class_is_undefined(self):
        conf = ConfusionMatrix([[4, 0, 0], [0, 2, 0], [0, 0, 0]])
        assert class_iou(conf) == [1.0, 1.0, None]
        assert mean_iou(conf) == 1.0

    def test_nothing_defined(self):
        with pytest.raises(EmptyEvaluationError):
            mean_iou(ConfusionMatrix.empty(3))

    @pytest.mark.parametrize(
        "ious, expected",
        [
            ((70.5, 63.1, 84.8, 61.9, 19.1, 89.8, 19.8, 30.9, 6.5, 70.1, 29.3), 49.6),
            ((72, 65.6, 84.6, 64.6, 20.8, 90.6, 24.9, 38.8, 8.0, 71.8, 33.9), 52.3),
        ],
    )
    def test_published_class_averages(self, ious, expected):
        assert average_iou([v / 100 for v in ious]) * 100 == pytest.approx(expected, abs=0.05)


class TestReports:
    def test_report_rows(self, tmp_path):
        mean = write_report(tmp_path / "r.csv", ConfusionMatrix([[3, 1], [2, 4]]), ["Sky", "Road"])
        rows = list(csv.reader((tmp_path / "r.csv").open(encoding="utf-8")))
        assert rows[0] == ["class", "iou"]
        assert rows[1] == ["Sky", "0.500000"]
        assert rows[-1][0] == "mean"
        assert mean == pytest.approx((3 / 6 + 4 / 7) / 2)

    def test_report_needs_one_name_per_class(self, tmp_path):
        with pytest.raises(DimensionMismatchError):
            write_report(tmp_path / "r.csv", ConfusionMatrix.empty(2), ["Sky"])

    def test_table_means_skip_blank_cells(self, tmp_path):
        rows = format_table({"GT": {0.5: 0.4, 1.0: 0.6}, "GT+PGT_S1": {0.5: None, 1.0: 0.8}}, [0.5, 1.0])
        assert rows[0] == ["set", "0.5", "1", "mean"]
        assert rows[1] == ["GT", "0.400000", "0.600000", "0.500000"]
        assert rows[2] == ["GT+PGT_S1", "", "0.800000", "0.800000"]
        assert rows[3] == ["mean", "0.400000", "0.700000", "0.600000"]
        write_table(tmp_path / "t.csv", rows)
        assert (tmp_path / "t.csv").read_text(encoding="utf-8").splitlines()[2] == "GT+PGT_S1,,0.800000,0.800000"
