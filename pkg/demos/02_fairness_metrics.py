"""Walk through the fairness metrics on a small hand-built example.

EOM (equality-of-opportunity, multi-class) averages the worst/best TPR
ratio across classes; PQD is the worst/best ratio of per-group balanced
accuracies. Both live in [0, 1]; 1.0 means every tone group is served
equally well. The script builds a prediction set where the classifier is
good for light tones and mediocre for dark ones, and shows exactly how the
numbers follow from the per-group table.

Run:  python3 demos/02_fairness_metrics.py
"""

from dermfair.metrics import (
    PredictionRecord,
    aggregate_splits,
    balanced_accuracy,
    build_report,
    compute_eom,
    compute_pqd,
    per_group_balanced_accuracy,
    tpr_table,
)


def synth_predictions():
    """40 records, 2 classes, 2 tone groups; group 2 gets the short straw."""
    preds = []
    plan = [
        # (y_true, group, n_correct, n_total)
        (1, 1, 9, 10),  # malignant, light tones: TPR 0.9
        (1, 2, 5, 10),  # malignant, dark tones:  TPR 0.5
        (0, 1, 8, 10),  # benign, light tones:    TPR 0.8
        (0, 2, 8, 10),  # benign, dark tones:     TPR 0.8
    ]
    i = 0
    for y_true, group, n_correct, n_total in plan:
        for j in range(n_total):
            y_pred = y_true if j < n_correct else 1 - y_true
            preds.append(
                PredictionRecord(image_id=f"p{i:03d}", y_true=y_true, y_pred=y_pred, group=group)
            )
            i += 1
    return preds


def main():
    preds = synth_predictions()

    table = tpr_table(preds)
    print("per-(class, group) true-positive rates:")
    print(table, "\n")

    eom = compute_eom(table)
    print("EOM: mean over classes of min/max TPR across groups")
    print(f"  class 0: min/max = 0.8/0.8 = 1.000")
    print(f"  class 1: min/max = 0.5/0.9 = {0.5 / 0.9:.4f}")
    print(f"  EOM = {eom:.4f}\n")

    ba_by_group = per_group_balanced_accuracy(preds)
    print(f"per-group balanced accuracy: { {g: round(v, 4) for g, v in ba_by_group.items()} }")
    pqd = compute_pqd(ba_by_group)
    print(f"PQD = min/max = {min(ba_by_group.values()):.3f}/{max(ba_by_group.values()):.3f} "
          f"= {pqd:.4f}")
    print(f"overall balanced accuracy = {float(balanced_accuracy(preds)):.4f}\n")

    report = build_report(preds, task="cancer", backbone="small_cnn", variant="baseline",
                          eval_set="internal")
    print(f"bundled FairnessReport: eom={report.eom:.4f} pqd={report.pqd:.4f} "
          f"ba={report.balanced_accuracy:.4f} over {report.n_records} records\n")

    # Repeated-split reporting: five split-level EOM values aggregate to the
    # mean ± sample std that the tables print.
    series = (0.63, 0.70, 0.77, 0.84, 0.91)
    print(f"five-split series {series} -> {aggregate_splits(series)}")


if __name__ == "__main__":
    main()
