"""Fairness metrics: TPR tables, balanced accuracy, EOM, PQD, aggregation."""

import pandas as pd
import pytest

from dermfair.metrics import (
    ABSENT,
    FairnessReport,
    MeanStd,
    PredictionRecord,
    aggregate_reports,
    aggregate_splits,
    balanced_accuracy,
    build_report,
    compute_eom,
    compute_pqd,
    is_absent,
    per_group_balanced_accuracy,
    tpr_table,
)


def pred(y_true, y_pred, group, i=[0]):
    i[0] += 1
    return PredictionRecord(image_id=f"p{i[0]}", y_true=y_true, y_pred=y_pred, group=group)


def preds_with_tpr(cls, group, tpr_value, n=10):
    """n records of class cls in group: tpr_value*n correct, rest wrong."""
    hits = round(tpr_value * n)
    other = 1 - cls if cls in (0, 1) else 0
    return [pred(cls, cls, group) for _ in range(hits)] + [
        pred(cls, other, group) for _ in range(n - hits)
    ]


class TestAbsent:
    def test_singleton_and_falsy(self):
        assert repr(ABSENT) == "ABSENT"
        assert not ABSENT
        assert is_absent(ABSENT)
        assert not is_absent(0.0)
        assert not is_absent(None)

    def test_empty_cell_is_absent_not_zero(self):
        predictions = preds_with_tpr(0, 0, 1.0) + preds_with_tpr(1, 0, 1.0)
        table = tpr_table(predictions, classes=[0, 1], groups=[0, 1])
        assert is_absent(table.loc[0, 1])
        assert table.loc[0, 0] == 1.0


class TestTprTable:
    def test_one_vs_rest_values(self):
        predictions = (
            preds_with_tpr(0, 0, 0.9, n=10)
            + preds_with_tpr(0, 1, 0.6, n=10)
            + preds_with_tpr(1, 0, 0.5, n=10)
            + preds_with_tpr(1, 1, 0.5, n=10)
        )
        table = tpr_table(predictions)
        assert table.loc[0, 0] == pytest.approx(0.9)
        assert table.loc[0, 1] == pytest.approx(0.6)
        assert table.loc[1, 0] == pytest.approx(0.5)
        assert table.loc[1, 1] == pytest.approx(0.5)

    def test_rows_classes_columns_groups(self):
        predictions = [pred(0, 0, 3), pred(2, 2, 5)]
        table = tpr_table(predictions)
        assert list(table.index) == [0, 2]
        assert list(table.columns) == [3, 5]


class TestBalancedAccuracy:
    def test_unweighted_mean_of_recalls(self):
        # class 0: 3/4 correct; class 1: 1/2 correct despite 10x support
        predictions = (
            [pred(0, 0, 0)] * 3
            + [pred(0, 1, 0)]
            + [pred(1, 1, 0)] * 10
            + [pred(1, 0, 0)] * 10
        )
        assert balanced_accuracy(predictions) == pytest.approx((0.75 + 0.5) / 2)

    def test_group_filter(self):
        predictions = preds_with_tpr(0, 0, 1.0) + preds_with_tpr(0, 1, 0.0)
        assert balanced_accuracy(predictions, group=0) == pytest.approx(1.0)
        assert balanced_accuracy(predictions, group=1) == pytest.approx(0.0)

    def test_empty_gives_absent(self):
        assert is_absent(balanced_accuracy([]))
        assert is_absent(balanced_accuracy([pred(0, 0, 0)], group=9))

    def test_per_group_map(self):
        predictions = preds_with_tpr(0, 0, 1.0) + preds_with_tpr(0, 2, 0.5)
        by_group = per_group_balanced_accuracy(predictions)
        assert by_group[0] == pytest.approx(1.0)
        assert by_group[2] == pytest.approx(0.5)


class TestEom:
    def test_worked_two_class_two_group_case(self):
        # TPRs {(0.9, 0.6), (0.5, 0.5)} -> mean(0.6/0.9, 1.0) = 0.8333...
        table = pd.DataFrame([[0.9, 0.6], [0.5, 0.5]], index=[0, 1], columns=[0, 1])
        assert compute_eom(table) == pytest.approx(0.8333, abs=1e-4)

    def test_perfect_equality_is_one(self):
        table = pd.DataFrame([[0.7, 0.7], [0.2, 0.2]], index=[0, 1], columns=[0, 1])
        assert compute_eom(table) == pytest.approx(1.0)

    def test_all_zero_class_counts_as_equal(self):
        table = pd.DataFrame([[0.0, 0.0], [0.5, 1.0]], index=[0, 1], columns=[0, 1])
        assert compute_eom(table) == pytest.approx((1.0 + 0.5) / 2)

    def test_absent_cells_excluded(self):
        table = pd.DataFrame(
            [[0.8, ABSENT], [0.4, 0.8]], index=[0, 1], columns=[0, 1], dtype=object
        )
        assert compute_eom(table) == pytest.approx((1.0 + 0.5) / 2)

    def test_fully_absent_class_skipped_with_warning(self):
        table = pd.DataFrame(
            [[ABSENT, ABSENT], [0.5, 1.0]], index=[0, 1], columns=[0, 1], dtype=object
        )
        with pytest.warns(UserWarning, match="skipped"):
            assert compute_eom(table) == pytest.approx(0.5)

    def test_all_classes_absent_fatal(self):
        table = pd.DataFrame(
            [[ABSENT, ABSENT]], index=[0], columns=[0, 1], dtype=object
        )
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError, match="EOM undefined"):
                compute_eom(table)


class TestPqd:
    def test_worked_case(self):
        assert compute_pqd({0: 0.8, 1: 0.6}) == pytest.approx(0.75, abs=1e-4)

    def test_equal_groups_is_one(self):
        assert compute_pqd({0: 0.55, 1: 0.55, 2: 0.55}) == pytest.approx(1.0)

    def test_absent_group_excluded(self):
        assert compute_pqd({0: 0.8, 1: ABSENT, 2: 0.4}) == pytest.approx(0.5)

    def test_all_absent_fatal(self):
        with pytest.raises(ValueError, match="PQD undefined"):
            compute_pqd({0: ABSENT, 1: ABSENT})

    def test_all_zero_is_one(self):
        assert compute_pqd({0: 0.0, 1: 0.0}) == pytest.approx(1.0)


class TestAggregation:
    def test_mean_and_sample_std(self):
        agg = aggregate_splits([0.63, 0.70, 0.77, 0.84, 0.91])
        assert agg.mean == pytest.approx(0.77)
        assert agg.n == 5
        assert agg.display() == "0.77 ± 0.11"

    def test_single_value_std_absent(self):
        agg = aggregate_splits([0.5])
        assert is_absent(agg.std)
        assert agg.display() == "0.50 ± —"

    def test_empty_fatal(self):
        with pytest.raises(ValueError):
            aggregate_splits([])

    def test_full_precision_retained(self):
        agg = aggregate_splits([0.123456789, 0.987654321])
        assert agg.mean == pytest.approx((0.123456789 + 0.987654321) / 2, abs=1e-15)

    def test_str_matches_display(self):
        agg = aggregate_splits([0.8, 0.8])
        assert str(agg) == agg.display()


class TestReports:
    def make_predictions(self):
        return (
            preds_with_tpr(0, 0, 0.9, n=10)
            + preds_with_tpr(0, 1, 0.6, n=10)
            + preds_with_tpr(1, 0, 0.5, n=10)
            + preds_with_tpr(1, 1, 0.5, n=10)
        )

    def test_build_report_values(self):
        report = build_report(
            self.make_predictions(),
            task="cancer",
            backbone="generic_cnn",
            variant="baseline",
            eval_set="internal",
            split_index=2,
        )
        assert report.eom == pytest.approx(0.8333, abs=1e-4)
        assert report.n_records == 40
        assert report.ba_by_group[0] == pytest.approx(0.7)
        assert report.ba_by_group[1] == pytest.approx(0.55)
        assert report.pqd == pytest.approx(0.55 / 0.7)

    def test_report_json_round_trip(self, tmp_path):
        report = build_report(
            self.make_predictions(),
            task="cancer",
            backbone="generic_cnn",
            variant="tabe",
            eval_set="external",
        )
        path = tmp_path / "report.json"
        report.save(path)
        loaded = FairnessReport.load(path)
        assert loaded.eom == report.eom
        assert loaded.pqd == report.pqd
        assert loaded.tpr == report.tpr
        assert loaded.ba_by_group == report.ba_by_group

    def test_absent_cells_survive_round_trip(self, tmp_path):
        predictions = preds_with_tpr(0, 0, 1.0) + preds_with_tpr(1, 0, 0.5) + preds_with_tpr(1, 1, 0.5)
        report = build_report(
            predictions, task="cancer", backbone="derm_clip",
            variant="baseline", eval_set="internal",
        )
        path = tmp_path / "report.json"
        report.save(path)
        loaded = FairnessReport.load(path)
        assert is_absent(loaded.tpr_frame().loc[0, 1])

    def test_aggregate_reports_across_splits(self):
        reports = []
        for split in range(3):
            reports.append(
                build_report(
                    self.make_predictions(),
                    task="cancer",
                    backbone="generic_cnn",
                    variant="baseline",
                    eval_set="internal",
                    split_index=split,
                )
            )
        agg = aggregate_reports(reports)
        assert agg["eom"].mean == pytest.approx(0.8333, abs=1e-4)
        assert agg["eom"].std == pytest.approx(0.0)
        assert isinstance(agg["balanced_accuracy"], MeanStd)


def test_scores_validated():
    with pytest.raises(ValueError):
        PredictionRecord(image_id="x", y_true=0, y_pred=0, group=0, scores=(1.2, -0.2))
    record = PredictionRecord(image_id="x", y_true=0, y_pred=0, group=0, scores=(0.6, 0.4))
    assert record.scores == (0.6, 0.4)
