"""Core record types: harmonized labels, skin-tone scale, dataset sources."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

FITZPATRICK_TYPES = (1, 2, 3, 4, 5, 6)

# Tone grouping schemes used by adversary heads and fairness metrics.
TONE_SCHEME_FITZPATRICK = "fitzpatrick6"
TONE_SCHEME_BINARY = "light_dark"  # I-III vs IV-VI


class Condition(str, enum.Enum):
    """Harmonized task label. EXCLUDED marks retained-but-unused diagnoses."""

    MALIGNANT = "malignant"
    BENIGN = "benign"
    ECZEMA = "eczema"
    PSORIASIS = "psoriasis"
    EXCLUDED = "excluded"


RETAINED_CONDITIONS = (
    Condition.MALIGNANT,
    Condition.BENIGN,
    Condition.ECZEMA,
    Condition.PSORIASIS,
)


class DataSource(str, enum.Enum):
    FITZPATRICK17K = "fitzpatrick17k"
    PADUFES = "padufes"
    SCIN = "scin"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image with a validated tone annotation.

    Invariants enforced at construction: tone is a Fitzpatrick type 1..6 and
    condition is one of the retained task labels (never EXCLUDED). Rows that
    cannot satisfy these are rejected during ingestion, not constructed.
    """

    image_id: str
    image_path: Path
    raw_diagnosis: str
    condition: Condition
    tone: int
    source: DataSource

    def __post_init__(self):
        if self.tone not in FITZPATRICK_TYPES:
            raise ValueError(f"tone must be in 1..6, got {self.tone!r}")
        if self.condition not in RETAINED_CONDITIONS:
            raise ValueError(f"condition {self.condition!r} is not a retained task label")


#: The two diagnostic tasks. Class order fixes the integer label encoding;
#: index 1 is the conventional "positive" class of each binary task.
TASKS: dict[str, tuple[Condition, Condition]] = {
    "cancer": (Condition.BENIGN, Condition.MALIGNANT),
    "inflammatory": (Condition.ECZEMA, Condition.PSORIASIS),
}


def task_classes(task: str) -> tuple[Condition, ...]:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    return TASKS[task]


def task_label(record: "ImageRecord", task: str) -> int:
    classes = task_classes(task)
    if record.condition not in classes:
        raise ValueError(
            f"record {record.image_id} has condition {record.condition.value}, "
            f"outside task {task!r} classes {[c.value for c in classes]}"
        )
    return classes.index(record.condition)


def records_for_task(records, task: str) -> list:
    """Keep only records whose condition belongs to the task's class pair."""
    classes = set(task_classes(task))
    return [r for r in records if r.condition in classes]


def coarsen_tone(tone: int, scheme: str = TONE_SCHEME_FITZPATRICK) -> int:
    """Map a Fitzpatrick type to a tone group under the given scheme.

    ``fitzpatrick6`` keeps the six types as-is; ``light_dark`` collapses to
    0 (types I-III) and 1 (types IV-VI).
    """
    if tone not in FITZPATRICK_TYPES:
        raise ValueError(f"tone must be in 1..6, got {tone!r}")
    if scheme == TONE_SCHEME_FITZPATRICK:
        return tone
    if scheme == TONE_SCHEME_BINARY:
        return 0 if tone <= 3 else 1
    raise ValueError(f"unknown tone scheme {scheme!r}")


def tone_group_count(scheme: str = TONE_SCHEME_FITZPATRICK) -> int:
    if scheme == TONE_SCHEME_FITZPATRICK:
        return 6
    if scheme == TONE_SCHEME_BINARY:
        return 2
    raise ValueError(f"unknown tone scheme {scheme!r}")
