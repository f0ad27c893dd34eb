"""Audit tables and trade-off plots from persisted fairness reports."""

import csv

import pytest

from dermfair.metrics import ABSENT, FairnessReport, MeanStd
from dermfair.reporting import (
    AggregatedRow,
    MISSING_CELL,
    aggregate_report_files,
    aggregate_run_reports,
    format_cell,
    load_rows,
    render_table,
    render_tradeoff_plot,
    save_rows,
)

SERIES = (0.63, 0.70, 0.77, 0.84, 0.91)  # mean 0.77, sample std ≈ 0.1107


def report(
    variant="tabe",
    backbone="generic_cnn",
    eval_set="external",
    split=0,
    eom=0.5,
    pqd=0.6,
    ba=0.7,
):
    return FairnessReport(
        task="cancer",
        backbone=backbone,
        variant=variant,
        eval_set=eval_set,
        split_index=split,
        classes=["benign", "malignant"],
        groups=[1, 2],
        tpr=[[0.5, 0.5], [0.5, 0.5]],
        ba_by_group={1: 0.5, 2: 0.5},
        balanced_accuracy=ba,
        eom=eom,
        pqd=pqd,
        n_records=10,
    )


class TestAggregation:
    def test_five_split_series(self):
        reports = [report(split=i, eom=v) for i, v in enumerate(SERIES)]
        rows = aggregate_run_reports(reports)
        assert len(rows) == 1
        row = rows[0]
        assert row.n_splits == 5
        assert row.metrics["eom"].mean == pytest.approx(0.77)
        assert row.metrics["eom"].display() == "0.77 ± 0.11"

    def test_distinct_keys_stay_separate(self):
        reports = [
            report(variant="baseline"),
            report(variant="tabe"),
            report(variant="tabe", eval_set="internal"),
        ]
        rows = aggregate_run_reports(reports)
        assert len(rows) == 3
        keys = {(r.variant, r.eval_set) for r in rows}
        assert keys == {("baseline", "external"), ("tabe", "external"), ("tabe", "internal")}

    def test_absent_metric_dropped_from_row(self):
        broken = report(split=1)
        broken.balanced_accuracy = ABSENT
        rows = aggregate_run_reports([report(split=0), broken])
        assert "balanced_accuracy" not in rows[0].metrics
        assert "eom" in rows[0].metrics

    def test_aggregate_from_files(self, tmp_path):
        for i, value in enumerate(SERIES):
            report(split=i, eom=value).save(tmp_path / f"r{i}.json")
        rows = aggregate_report_files(sorted(tmp_path.glob("*.json")))
        assert rows[0].metrics["eom"].display() == "0.77 ± 0.11"


class TestRowPersistence:
    def test_round_trip(self, tmp_path):
        rows = aggregate_run_reports([report(split=i, eom=v) for i, v in enumerate(SERIES)])
        path = tmp_path / "rows.json"
        save_rows(rows, path)
        loaded = load_rows(path)
        assert len(loaded) == 1
        assert loaded[0].metrics["eom"].mean == rows[0].metrics["eom"].mean
        assert loaded[0].metrics["eom"].values == rows[0].metrics["eom"].values

    def test_single_split_std_survives_round_trip(self, tmp_path):
        rows = aggregate_run_reports([report()])
        path = tmp_path / "rows.json"
        save_rows(rows, path)
        loaded = load_rows(path)
        ms = loaded[0].metrics["eom"]
        assert ms.n == 1
        assert ms.display().endswith("—")

    def test_row_dict_round_trip(self):
        row = AggregatedRow(
            task="cancer",
            variant="vae",
            backbone="derm_clip",
            eval_set="internal",
            metrics={"eom": MeanStd(mean=0.5, std=0.1, n=3, values=(0.4, 0.5, 0.6))},
            n_splits=3,
        )
        again = AggregatedRow.from_dict(row.to_dict())
        assert again.metrics["eom"] == row.metrics["eom"]
        assert again.backbone == "derm_clip"


class TestRenderTable:
    def _rows(self):
        reports = [report(variant="tabe", split=i, eom=v) for i, v in enumerate(SERIES)]
        reports += [report(variant="baseline", split=i, eom=v - 0.2) for i, v in enumerate(SERIES)]
        return aggregate_run_reports(reports)

    def test_worked_cell_lands_in_variant_row(self):
        table = render_table(self._rows(), metric="eom")
        tabe_line = next(line for line in table.splitlines() if line.startswith("tabe"))
        assert "0.77 ± 0.11" in tabe_line

    def test_best_cell_starred(self):
        table = render_table(self._rows(), metric="eom")
        tabe_line = next(line for line in table.splitlines() if line.startswith("tabe"))
        base_line = next(line for line in table.splitlines() if line.startswith("baseline"))
        assert "0.77 ± 0.11*" in tabe_line
        assert "*" not in base_line

    def test_column_header_names_backbone_and_eval_set(self):
        table = render_table(self._rows(), metric="eom")
        header = table.splitlines()[0]
        assert "Model" in header
        assert "generic_cnn External" in header

    def test_missing_combination_renders_dash(self):
        rows = aggregate_run_reports(
            [report(variant="tabe"), report(variant="baseline", eval_set="internal")]
        )
        table = render_table(rows, metric="eom")
        assert MISSING_CELL in table

    def test_variant_order_is_canonical(self):
        rows = aggregate_run_reports([report(variant="vae"), report(variant="baseline")])
        lines = render_table(rows).splitlines()
        assert lines[2].startswith("baseline")
        assert lines[3].startswith("vae")

    def test_title_emitted(self):
        table = render_table(self._rows(), metric="eom", title="Cancer audit")
        assert table.splitlines()[0] == "Cancer audit"

    def test_no_rows_fatal(self):
        with pytest.raises(ValueError, match="at least one"):
            render_table([])

    def test_format_cell_missing(self):
        assert format_cell(None) == MISSING_CELL


class TestTradeoffPlot:
    def test_artifacts_written(self, tmp_path):
        rows = aggregate_run_reports([report(variant="tabe"), report(variant="baseline", ba=0.8)])
        outputs = render_tradeoff_plot(rows, tmp_path / "fig" / "tradeoff", metric="eom")
        for kind in ("svg", "png", "csv"):
            assert outputs[kind].exists(), kind

    def test_csv_contents(self, tmp_path):
        reports = [report(variant="tabe", split=i, eom=v) for i, v in enumerate(SERIES)]
        rows = aggregate_run_reports(reports)
        outputs = render_tradeoff_plot(rows, tmp_path / "tradeoff", metric="eom")
        with open(outputs["csv"], newline="") as fh:
            body = list(csv.DictReader(fh))
        assert len(body) == 1
        assert body[0]["variant"] == "tabe"
        assert float(body[0]["eom"]) == pytest.approx(0.77)
        assert float(body[0]["eom_std"]) == pytest.approx(0.110680, abs=1e-5)

    def test_rows_missing_metric_skipped(self, tmp_path):
        incomplete = report(variant="vae")
        incomplete.balanced_accuracy = ABSENT
        rows = aggregate_run_reports([incomplete, report(variant="tabe")])
        outputs = render_tradeoff_plot(rows, tmp_path / "tradeoff")
        with open(outputs["csv"], newline="") as fh:
            body = list(csv.DictReader(fh))
        assert [entry["variant"] for entry in body] == ["tabe"]

    def test_nothing_plottable_fatal(self, tmp_path):
        incomplete = report(variant="vae")
        incomplete.balanced_accuracy = ABSENT
        rows = aggregate_run_reports([incomplete])
        with pytest.raises(ValueError, match="at least one complete point"):
            render_tradeoff_plot(rows, tmp_path / "tradeoff")
