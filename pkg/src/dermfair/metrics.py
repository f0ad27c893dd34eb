"""Group-fairness metrics: per-group TPR, balanced accuracy, EOM, PQD.

EOM (equality-of-opportunity, multi-class) averages the min/max TPR ratio
across classes; PQD is the min/max ratio of per-group balanced accuracies.
Cells with no support are ABSENT — a distinct sentinel, never coerced to 0 —
and ratio conventions for degenerate denominators are documented on each
function.
"""

from __future__ import annotations

import json
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class _AbsentType:
    """Singleton marker for metric cells with no supporting records."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSENT"

    def __bool__(self):
        return False


ABSENT = _AbsentType()


def is_absent(value) -> bool:
    return value is ABSENT


@dataclass(frozen=True)
class PredictionRecord:
    """One evaluated example: truth, prediction, scores, tone group."""

    image_id: str
    y_true: int
    y_pred: int
    group: int
    scores: tuple[float, ...] | None = None
    split: int = 0

    def __post_init__(self):
        if self.scores is not None:
            if any(not (0.0 <= s <= 1.0) for s in self.scores):
                raise ValueError(f"scores outside [0,1]: {self.scores}")


def _filtered(predictions, group=None):
    if group is None:
        return list(predictions)
    return [p for p in predictions if p.group == group]


def tpr_table(predictions, classes=None, groups=None) -> pd.DataFrame:
    """Per-(class, group) true-positive rate, one-vs-rest.

    Cell (i, j) counts predictions among records with y_true == i in group j;
    a zero denominator yields ABSENT. Rows are classes, columns are groups.
    """
    predictions = list(predictions)
    if classes is None:
        classes = sorted({p.y_true for p in predictions})
    if groups is None:
        groups = sorted({p.group for p in predictions})
    table = pd.DataFrame(index=list(classes), columns=list(groups), dtype=object)
    for cls in classes:
        for grp in groups:
            members = [p for p in predictions if p.y_true == cls and p.group == grp]
            if not members:
                table.loc[cls, grp] = ABSENT
            else:
                hits = sum(1 for p in members if p.y_pred == cls)
                table.loc[cls, grp] = hits / len(members)
    return table


def balanced_accuracy(predictions, group=None):
    """Unweighted mean of per-class recalls over classes present.

    Returns ABSENT when the (optionally group-filtered) record set is empty.
    """
    subset = _filtered(predictions, group)
    if not subset:
        return ABSENT
    recalls = []
    for cls in sorted({p.y_true for p in subset}):
        members = [p for p in subset if p.y_true == cls]
        recalls.append(sum(1 for p in members if p.y_pred == cls) / len(members))
    return float(np.mean(recalls))


def per_group_balanced_accuracy(predictions, groups=None) -> dict:
    predictions = list(predictions)
    if groups is None:
        groups = sorted({p.group for p in predictions})
    return {g: balanced_accuracy(predictions, group=g) for g in groups}


def _ratio(values: list[float]) -> float:
    top = max(values)
    if top == 0.0:
        # All defined cells are zero: equal failure is still equality.
        return 1.0
    return min(values) / top


def compute_eom(table: pd.DataFrame) -> float:
    """Mean over classes of min/max TPR across groups (Eq. with C classes).

    ABSENT cells are excluded per class; a class with no defined cell is
    skipped with a warning. All classes skipped is fatal.
    """
    ratios = []
    for cls in table.index:
        defined = [v for v in table.loc[cls] if not is_absent(v)]
        if not defined:
            _warnings.warn(f"class {cls!r} has no defined TPR cell; skipped in EOM")
            continue
        ratios.append(_ratio(defined))
    if not ratios:
        raise ValueError("every class has only ABSENT TPR cells; EOM undefined")
    return float(np.mean(ratios))


def compute_pqd(ba_by_group: dict) -> float:
    """min/max of per-group balanced accuracies, ABSENT groups excluded."""
    defined = [v for v in ba_by_group.values() if not is_absent(v)]
    if not defined:
        raise ValueError("no group has a defined balanced accuracy; PQD undefined")
    return float(_ratio(defined))


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: object  # float, or ABSENT when n < 2
    n: int
    values: tuple[float, ...] = ()

    def display(self) -> str:
        if is_absent(self.std):
            return f"{self.mean:.2f} ± —"
        return f"{self.mean:.2f} ± {self.std:.2f}"

    def __str__(self):
        return self.display()


def aggregate_splits(values) -> MeanStd:
    """Mean and sample standard deviation (ddof=1) across split runs.

    Full precision is retained on the object; rounding happens only in
    ``display``. Fewer than two values → std is ABSENT.
    """
    values = tuple(float(v) for v in values)
    if not values:
        raise ValueError("aggregate_splits needs at least one value")
    mean = float(np.mean(values))
    std = ABSENT if len(values) < 2 else float(np.std(values, ddof=1))
    return MeanStd(mean=mean, std=std, n=len(values), values=values)


@dataclass
class FairnessReport:
    """Single-run fairness audit for one (task, backbone, variant, eval set)."""

    task: str
    backbone: str
    variant: str
    eval_set: str
    split_index: int
    classes: list
    groups: list
    tpr: list  # rows per class, cells float or None (ABSENT)
    ba_by_group: dict
    balanced_accuracy: object
    eom: float
    pqd: float
    n_records: int = 0
    extras: dict = field(default_factory=dict)

    def tpr_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(index=self.classes, columns=self.groups, dtype=object)
        for i, cls in enumerate(self.classes):
            for j, grp in enumerate(self.groups):
                cell = self.tpr[i][j]
                frame.loc[cls, grp] = ABSENT if cell is None else cell
        return frame

    def to_dict(self) -> dict:
        def scrub(v):
            return None if is_absent(v) else v

        return {
            "task": self.task,
            "backbone": self.backbone,
            "variant": self.variant,
            "eval_set": self.eval_set,
            "split_index": self.split_index,
            "classes": list(self.classes),
            "groups": [int(g) for g in self.groups],
            "tpr": [[scrub(c) for c in row] for row in self.tpr],
            "ba_by_group": {str(k): scrub(v) for k, v in self.ba_by_group.items()},
            "balanced_accuracy": scrub(self.balanced_accuracy),
            "eom": self.eom,
            "pqd": self.pqd,
            "n_records": self.n_records,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FairnessReport":
        def lift(v):
            return ABSENT if v is None else v

        return cls(
            task=payload["task"],
            backbone=payload["backbone"],
            variant=payload["variant"],
            eval_set=payload["eval_set"],
            split_index=payload["split_index"],
            classes=payload["classes"],
            groups=[int(g) for g in payload["groups"]],
            tpr=[[None if c is None else float(c) for c in row] for row in payload["tpr"]],
            ba_by_group={int(k): lift(v) for k, v in payload["ba_by_group"].items()},
            balanced_accuracy=lift(payload["balanced_accuracy"]),
            eom=payload["eom"],
            pqd=payload["pqd"],
            n_records=payload.get("n_records", 0),
            extras=payload.get("extras", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FairnessReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_report(
    predictions,
    task: str,
    backbone: str,
    variant: str,
    eval_set: str,
    split_index: int = 0,
    classes=None,
    groups=None,
    extras: dict | None = None,
) -> FairnessReport:
    predictions = list(predictions)
    table = tpr_table(predictions, classes=classes, groups=groups)
    ba_groups = per_group_balanced_accuracy(predictions, groups=list(table.columns))
    tpr_rows = [
        [None if is_absent(table.loc[cls, grp]) else float(table.loc[cls, grp]) for grp in table.columns]
        for cls in table.index
    ]
    return FairnessReport(
        task=task,
        backbone=backbone,
        variant=variant,
        eval_set=eval_set,
        split_index=split_index,
        classes=list(table.index),
        groups=list(table.columns),
        tpr=tpr_rows,
        ba_by_group=ba_groups,
        balanced_accuracy=balanced_accuracy(predictions),
        eom=compute_eom(table),
        pqd=compute_pqd(ba_groups),
        n_records=len(predictions),
        extras=extras or {},
    )


def aggregate_reports(reports) -> dict:
    """Collapse per-split reports into mean ± std per scalar metric."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for metric in ("eom", "pqd", "balanced_accuracy"):
        series = [getattr(r, metric) for r in reports]
        if any(is_absent(v) for v in series):
            out[metric] = ABSENT
        else:
            out[metric] = aggregate_splits(series)
    return out
