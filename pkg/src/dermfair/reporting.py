"""Rendering: audit tables (rows = variants, columns = backbone × eval set)
and fairness-vs-accuracy trade-off plots.

Renderers consume persisted FairnessReport files (or rows aggregated from
them), never live training state, so any table or figure can be regenerated
from the results directory alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from dermfair.metrics import ABSENT, FairnessReport, MeanStd, aggregate_splits, is_absent

MISSING_CELL = "—"
BEST_MARKER = "*"

#: Marker shape per backbone family; the CLIP-style encoder draws as a
#: rhombus, the convention used in the trade-off figures.
BACKBONE_MARKERS = {
    "derm_clip": "D",
    "generic_cnn": "o",
    "small_cnn": "s",
}

VARIANT_COLORS = {
    "baseline": "#555555",
    "tabe": "#d62728",
    "fairdisco": "#1f77b4",
    "vae": "#2ca02c",
}

VARIANT_ORDER = ("baseline", "tabe", "fairdisco", "vae")
EVAL_ORDER = ("internal", "external")
BACKBONE_ORDER = ("generic_cnn", "derm_clip", "small_cnn")


@dataclass
class AggregatedRow:
    """Mean ± std across splits for one (task, variant, backbone, eval set)."""

    task: str
    variant: str
    backbone: str
    eval_set: str
    metrics: dict = field(default_factory=dict)  # name -> MeanStd
    n_splits: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "variant": self.variant,
            "backbone": self.backbone,
            "eval_set": self.eval_set,
            "n_splits": self.n_splits,
            "metrics": {
                name: {
                    "mean": ms.mean,
                    "std": None if is_absent(ms.std) else ms.std,
                    "n": ms.n,
                    "values": list(ms.values),
                }
                for name, ms in self.metrics.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AggregatedRow":
        metrics = {}
        for name, entry in payload["metrics"].items():
            metrics[name] = MeanStd(
                mean=entry["mean"],
                std=ABSENT if entry["std"] is None else entry["std"],
                n=entry["n"],
                values=tuple(entry.get("values", ())),
            )
        return cls(
            task=payload["task"],
            variant=payload["variant"],
            backbone=payload["backbone"],
            eval_set=payload["eval_set"],
            metrics=metrics,
            n_splits=payload["n_splits"],
        )


def aggregate_report_files(paths) -> list[AggregatedRow]:
    """Group per-split FairnessReport files and aggregate their metrics."""
    reports = [FairnessReport.load(p) for p in paths]
    return aggregate_run_reports(reports)


def aggregate_run_reports(reports) -> list[AggregatedRow]:
    grouped: dict[tuple, list[FairnessReport]] = {}
    for report in reports:
        key = (report.task, report.variant, report.backbone, report.eval_set)
        grouped.setdefault(key, []).append(report)
    rows = []
    for (task, variant, backbone, eval_set), members in sorted(grouped.items()):
        metrics = {}
        for name in ("eom", "pqd", "balanced_accuracy"):
            series = [getattr(r, name) for r in members]
            if any(is_absent(v) for v in series):
                continue
            metrics[name] = aggregate_splits(series)
        rows.append(
            AggregatedRow(
                task=task,
                variant=variant,
                backbone=backbone,
                eval_set=eval_set,
                metrics=metrics,
                n_splits=len(members),
            )
        )
    return rows


def save_rows(rows, path: str | Path) -> None:
    payload = [row.to_dict() for row in rows]
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_rows(path: str | Path) -> list[AggregatedRow]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [AggregatedRow.from_dict(entry) for entry in payload]


def _ordered(values, canonical) -> list:
    seen = list(dict.fromkeys(values))
    ranked = [v for v in canonical if v in seen]
    return ranked + [v for v in seen if v not in ranked]


def format_cell(ms: MeanStd | None) -> str:
    if ms is None:
        return MISSING_CELL
    return ms.display()


def render_table(rows, metric: str = "eom", title: str | None = None) -> str:
    """Plain-text audit table for one metric.

    Rows are model variants; column groups are backbone × {internal,
    external}; cells are "mean ± std" at two decimals. The best (highest
    mean) defined cell per column gets a trailing ``*``; undefined cells
    render as ``—``.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("render_table needs at least one aggregated row")
    variants = _ordered((r.variant for r in rows), VARIANT_ORDER)
    columns = _ordered(
        ((r.backbone, r.eval_set) for r in rows),
        [(b, e) for b in BACKBONE_ORDER for e in EVAL_ORDER],
    )
    lookup = {(r.variant, r.backbone, r.eval_set): r.metrics.get(metric) for r in rows}

    best: dict[tuple, float] = {}
    for column in columns:
        means = [
            lookup[(v, *column)].mean
            for v in variants
            if lookup.get((v, *column)) is not None
        ]
        if means:
            best[column] = max(means)

    header = ["Model"] + [f"{backbone} {eval_set.capitalize()}" for backbone, eval_set in columns]
    body: list[list[str]] = []
    for variant in variants:
        line = [variant]
        for column in columns:
            ms = lookup.get((variant, *column))
            cell = format_cell(ms)
            if ms is not None and column in best and ms.mean == best[column]:
                cell += BEST_MARKER
            line.append(cell)
        body.append(line)

    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    if title:
        lines.append(title)
    lines.append(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(header)))
    lines.append("-+-".join("-" * w for w in widths))
    for row in body:
        lines.append(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"


def render_tradeoff_plot(
    rows,
    out_base: str | Path,
    metric: str = "eom",
    title: str | None = None,
) -> dict[str, Path]:
    """Fairness-vs-accuracy scatter: SVG + PNG + the underlying CSV.

    x is balanced accuracy, y the fairness metric; variant sets the color and
    backbone the marker shape (rhombus for the CLIP-style encoder). Rows
    missing either metric are skipped; zero plottable points is fatal.
    """
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    points = []
    for row in rows:
        ba = row.metrics.get("balanced_accuracy")
        fairness = row.metrics.get(metric)
        if ba is None or fairness is None:
            continue
        points.append((row, ba, fairness))
    if not points:
        raise ValueError("render_tradeoff_plot needs at least one complete point")

    csv_path = out_base.with_suffix(".csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task", "variant", "backbone", "eval_set", "balanced_accuracy", "ba_std", metric, f"{metric}_std", "n_splits"]
        )
        for row, ba, fairness in points:
            writer.writerow(
                [
                    row.task,
                    row.variant,
                    row.backbone,
                    row.eval_set,
                    f"{ba.mean:.6f}",
                    "" if is_absent(ba.std) else f"{ba.std:.6f}",
                    f"{fairness.mean:.6f}",
                    "" if is_absent(fairness.std) else f"{fairness.std:.6f}",
                    row.n_splits,
                ]
            )

    fig, ax = plt.subplots(figsize=(6, 4.5))
    seen_variants = set()
    seen_backbones = set()
    for row, ba, fairness in points:
        ax.scatter(
            ba.mean,
            fairness.mean,
            c=VARIANT_COLORS.get(row.variant, "#888888"),
            marker=BACKBONE_MARKERS.get(row.backbone, "x"),
            s=70,
            edgecolors="black",
            linewidths=0.5,
            zorder=3,
        )
        seen_variants.add(row.variant)
        seen_backbones.add(row.backbone)
    ax.set_xlabel("Balanced accuracy")
    ax.set_ylabel(metric.upper())
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)

    from matplotlib.lines import Line2D

    handles = [
        Line2D([], [], marker="o", linestyle="", color=VARIANT_COLORS.get(v, "#888888"), label=v)
        for v in _ordered(seen_variants, VARIANT_ORDER)
    ]
    handles += [
        Line2D(
            [],
            [],
            marker=BACKBONE_MARKERS.get(b, "x"),
            linestyle="",
            color="black",
            fillstyle="none",
            label=b,
        )
        for b in _ordered(seen_backbones, BACKBONE_ORDER)
    ]
    ax.legend(handles=handles, fontsize=8, loc="best")
    fig.tight_layout()
    svg_path = out_base.with_suffix(".svg")
    png_path = out_base.with_suffix(".png")
    fig.savefig(svg_path)
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return {"svg": svg_path, "png": png_path, "csv": csv_path}
