"""Turn per-split fairness reports into audit tables and trade-off figures.

A full audit produces one FairnessReport per (task, variant, backbone,
eval set, split). This script fabricates such a result set — five splits,
four variants, two backbones, internal + external eval — with numbers that
tell the usual story: debiasing trades a little balanced accuracy for a
better worst-group ratio, and the gap is wider on the external set. It then
renders the EOM table, saves the aggregated rows, and draws the
fairness-vs-accuracy scatter (variant = color, backbone = marker).

Run:  python3 demos/04_reports_and_plots.py
Artifacts land in demos/_out/04_reports_and_plots/.
"""

from pathlib import Path

import numpy as np

from dermfair.metrics import FairnessReport
from dermfair.reporting import (
    aggregate_run_reports,
    load_rows,
    render_table,
    render_tradeoff_plot,
    save_rows,
)

OUT = Path(__file__).parent / "_out" / Path(__file__).stem

#: (variant, backbone) -> (external EOM center, external BA center).
#: Internal numbers are derived: less disparity, higher accuracy.
STORY = {
    ("baseline", "generic_cnn"): (0.42, 0.78),
    ("tabe", "generic_cnn"): (0.56, 0.72),
    ("fairdisco", "generic_cnn"): (0.51, 0.70),
    ("vae", "generic_cnn"): (0.47, 0.66),
    ("baseline", "derm_clip"): (0.48, 0.80),
    ("tabe", "derm_clip"): (0.55, 0.75),
    ("fairdisco", "derm_clip"): (0.53, 0.73),
    ("vae", "derm_clip"): (0.49, 0.69),
}


def canned_report(task, variant, backbone, eval_set, split, eom, pqd, ba):
    """A persisted-style report; per-group details are not needed here."""
    return FairnessReport(
        task=task,
        backbone=backbone,
        variant=variant,
        eval_set=eval_set,
        split_index=split,
        classes=[0, 1],
        groups=[1, 2, 3, 4, 5, 6],
        tpr=[[None] * 6, [None] * 6],
        ba_by_group={},
        balanced_accuracy=ba,
        eom=eom,
        pqd=pqd,
        n_records=400,
    )


def fabricate_reports():
    rng = np.random.default_rng(20250825)
    reports = []
    for (variant, backbone), (eom_c, ba_c) in STORY.items():
        for eval_set, eom_shift, ba_shift in (("internal", 0.18, 0.08), ("external", 0.0, 0.0)):
            for split in range(5):
                eom = float(np.clip(eom_c + eom_shift + rng.normal(0, 0.03), 0, 1))
                ba = float(np.clip(ba_c + ba_shift + rng.normal(0, 0.02), 0, 1))
                pqd = float(np.clip(eom + 0.25 + rng.normal(0, 0.02), 0, 1))
                reports.append(
                    canned_report("cancer", variant, backbone, eval_set, split, eom, pqd, ba)
                )
    return reports


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    reports = fabricate_reports()
    print(f"fabricated {len(reports)} per-split reports "
          f"({len(reports) // 5} groups x 5 splits)\n")

    rows = aggregate_run_reports(reports)

    for metric in ("eom", "balanced_accuracy"):
        table = render_table(rows, metric=metric, title=f"cancer task — {metric}")
        print(table)

    rows_path = OUT / "aggregated_rows.json"
    save_rows(rows, rows_path)
    assert len(load_rows(rows_path)) == len(rows)  # round-trips
    print(f"aggregated rows -> {rows_path}")

    artifacts = render_tradeoff_plot(
        [r for r in rows if r.eval_set == "external"],
        OUT / "tradeoff_external",
        metric="eom",
        title="external eval: fairness vs accuracy",
    )
    for kind, path in artifacts.items():
        print(f"trade-off {kind} -> {path}")


if __name__ == "__main__":
    main()
