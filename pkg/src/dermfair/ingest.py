"""Manifest ingestion for the three clinical sources and the synthetic one.

Every manifest row either becomes a validated ImageRecord or lands in the
rejection log with a reason; nothing is dropped silently. Unknown diagnosis
strings are a fatal error (the mapping must be total), while unknown tones,
excluded conditions, and missing files are per-row rejections.
"""

from __future__ import annotations

import ast
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import pandas as pd

from dermfair.errors import SchemaError
from dermfair.mapping import DiagnosisMapping, bundled_mapping
from dermfair.records import FITZPATRICK_TYPES, Condition, DataSource, ImageRecord

REASON_UNKNOWN_TONE = "unknown tone"
REASON_EXCLUDED = "excluded condition"
REASON_MISSING_IMAGE = "missing image file"
REASON_DUPLICATE = "duplicate image id"
REASON_UNREADABLE = "unreadable image"

REQUIRED_COLUMNS = {
    DataSource.FITZPATRICK17K: ("md5hash", "label", "fitzpatrick_scale"),
    DataSource.PADUFES: ("img_id", "diagnostic", "fitspatrick"),
    DataSource.SCIN: (
        "case_id",
        "dermatologist_skin_condition_on_label_name",
        "fitzpatrick_skin_type",
    ),
    DataSource.SYNTHETIC: ("image_id", "label", "fitzpatrick_scale"),
}

_IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")

_ROMAN_TONES = {"i": 1, "ii": 2, "iii": 3, "iv": 4, "v": 5, "vi": 6}
_TRAILING_DIGIT = re.compile(r"(\d)\s*$")


@dataclass(frozen=True)
class Rejection:
    row: int
    image_id: str
    reason: str
    detail: str = ""


class RejectionLog:
    """Append-only log of per-row rejections, serializable as JSON lines."""

    def __init__(self):
        self.rejections: list[Rejection] = []

    def append(self, row: int, image_id: str, reason: str, detail: str = "") -> None:
        self.rejections.append(Rejection(row, image_id, reason, detail))

    def __len__(self) -> int:
        return len(self.rejections)

    def counts(self) -> dict[str, int]:
        return dict(Counter(r.reason for r in self.rejections))

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rejections:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "RejectionLog":
        log = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                log.rejections.append(Rejection(**json.loads(line)))
        return log


def parse_tone(value) -> int | None:
    """Best-effort parse of one tone annotation; None when unknown/invalid.

    Accepts integers/floats 1..6, roman numerals I..VI, and strings ending in
    a digit (e.g. ``FST3``). -1 and empty values are unknown by convention.
    """
    if value is None:
        return None
    text = str(value).strip().lower()
    if not text or text in {"nan", "none", "unknown"}:
        return None
    if text in _ROMAN_TONES:
        return _ROMAN_TONES[text]
    try:
        numeric = float(text)
    except ValueError:
        match = _TRAILING_DIGIT.search(text)
        if not match:
            return None
        numeric = float(match.group(1))
    if numeric != int(numeric):
        return None
    tone = int(numeric)
    return tone if tone in FITZPATRICK_TYPES else None


def parse_multi_rater_tone(cell) -> int | None:
    """Collapse a possibly multi-rater tone cell to one Fitzpatrick type.

    Raters may be separated by ``;``, ``|`` or ``/``. The mode wins; ties are
    broken toward the darker type, which is the conservative choice when the
    annotation feeds a fairness audit of under-represented groups.
    """
    if cell is None:
        return None
    parts = re.split(r"[;|/]", str(cell))
    tones = [t for t in (parse_tone(p) for p in parts) if t is not None]
    if not tones:
        return None
    freq = Counter(tones)
    top = max(freq.values())
    return max(t for t, n in freq.items() if n == top)


def _first_condition_label(cell: str) -> str:
    """Top-1 collapse for SCIN's weighted multi-label condition field."""
    text = str(cell).strip()
    if text.startswith("[") and text.endswith("]"):
        try:
            parsed = ast.literal_eval(text)
        except (ValueError, SyntaxError):
            parsed = None
        if isinstance(parsed, (list, tuple)) and parsed:
            return str(parsed[0])
    for sep in ("|", ";"):
        if sep in text:
            return text.split(sep, 1)[0]
    return text


def _resolve_image_path(image_dir: Path | None, stem: str) -> tuple[Path, bool]:
    """Return (path, exists). Without an image_dir the path is unverified."""
    base = image_dir if image_dir is not None else Path(".")
    if Path(stem).suffix.lower() in _IMAGE_EXTENSIONS:
        candidate = base / stem
        return candidate, candidate.exists()
    for ext in _IMAGE_EXTENSIONS:
        candidate = base / f"{stem}{ext}"
        if candidate.exists():
            return candidate, True
    return base / f"{stem}{_IMAGE_EXTENSIONS[0]}", False


def _row_fields(source: DataSource, row: pd.Series) -> tuple[str, str, int | None]:
    """Extract (image id, raw diagnosis, tone) under the source schema."""
    if source is DataSource.FITZPATRICK17K or source is DataSource.SYNTHETIC:
        id_col = "md5hash" if source is DataSource.FITZPATRICK17K else "image_id"
        return str(row[id_col]), str(row["label"]), parse_tone(row["fitzpatrick_scale"])
    if source is DataSource.PADUFES:
        return str(row["img_id"]), str(row["diagnostic"]), parse_tone(row["fitspatrick"])
    if source is DataSource.SCIN:
        raw = _first_condition_label(row["dermatologist_skin_condition_on_label_name"])
        return str(row["case_id"]), raw, parse_multi_rater_tone(row["fitzpatrick_skin_type"])
    raise ValueError(f"unsupported source {source!r}")


def load_manifest(
    source: DataSource,
    metadata_path: str | Path,
    mapping: DiagnosisMapping | None = None,
    image_dir: str | Path | None = None,
    check_images: bool | None = None,
    dedup_by_id: bool = False,
) -> tuple[list[ImageRecord], RejectionLog]:
    """Load one dataset manifest into validated records plus a rejection log.

    The mapping defaults to the bundled file for ``source`` and is validated
    for totality over the manifest before any row is processed. Image files
    are checked for existence when ``image_dir`` is given (or ``check_images``
    is forced). ``dedup_by_id`` rejects repeated image ids after the first
    occurrence; it is off by default.
    """
    metadata_path = Path(metadata_path)
    if not metadata_path.exists():
        raise SchemaError(f"metadata file not found: {metadata_path}")
    frame = pd.read_csv(metadata_path, dtype=str, keep_default_na=False)

    required = REQUIRED_COLUMNS[source]
    missing_cols = [c for c in required if c not in frame.columns]
    if missing_cols:
        raise SchemaError(
            f"{metadata_path} does not match the {source.value} schema: "
            f"missing columns {missing_cols}, found {list(frame.columns)}"
        )

    mapping = mapping if mapping is not None else bundled_mapping(source)
    raw_values = [_row_fields(source, row)[1] for _, row in frame.iterrows()]
    mapping.validate_total(raw_values)

    if check_images is None:
        check_images = image_dir is not None
    image_dir = Path(image_dir) if image_dir is not None else None

    records: list[ImageRecord] = []
    log = RejectionLog()
    seen_ids: set[str] = set()
    for idx, (_, row) in enumerate(frame.iterrows()):
        image_id, raw_diagnosis, tone = _row_fields(source, row)
        if dedup_by_id and image_id in seen_ids:
            log.append(idx, image_id, REASON_DUPLICATE)
            continue
        seen_ids.add(image_id)
        if tone is None:
            log.append(idx, image_id, REASON_UNKNOWN_TONE)
            continue
        condition = mapping.harmonize(raw_diagnosis)
        if condition is Condition.EXCLUDED:
            log.append(idx, image_id, REASON_EXCLUDED, detail=raw_diagnosis)
            continue
        path, exists = _resolve_image_path(image_dir, image_id)
        if check_images and not exists:
            log.append(idx, image_id, REASON_MISSING_IMAGE, detail=str(path))
            continue
        records.append(
            ImageRecord(
                image_id=image_id,
                image_path=path,
                raw_diagnosis=raw_diagnosis,
                condition=condition,
                tone=tone,
                source=source,
            )
        )
    return records, log


def tone_distribution_table(records) -> pd.DataFrame:
    """Counts by (source, condition, tone) with a totals column.

    Layout matches the audit table format: one row per (dataset, lesion
    class), columns I..VI plus Total.
    """
    tone_cols = ["I", "II", "III", "IV", "V", "VI"]
    counts: dict[tuple[str, str], Counter] = {}
    for rec in records:
        key = (rec.source.value, rec.condition.value)
        counts.setdefault(key, Counter())[rec.tone] += 1
    rows = []
    for (source, condition), ctr in sorted(counts.items()):
        row = {"Dataset": source, "Lesion": condition}
        for tone, col in zip(FITZPATRICK_TYPES, tone_cols):
            row[col] = int(ctr.get(tone, 0))
        row["Total"] = int(sum(ctr.values()))
        rows.append(row)
    table = pd.DataFrame(rows, columns=["Dataset", "Lesion", *tone_cols, "Total"])
    if table.empty:
        table = pd.DataFrame(columns=["Dataset", "Lesion", *tone_cols, "Total"])
    return table


def write_tone_table(table: pd.DataFrame, path: str | Path) -> None:
    table.to_csv(path, index=False)


def records_to_frame(records) -> pd.DataFrame:
    """Flatten records for CSV export (used by the ``ingest`` CLI verb)."""
    return pd.DataFrame(
        [
            {
                "image_id": r.image_id,
                "image_path": str(r.image_path),
                "raw_diagnosis": r.raw_diagnosis,
                "condition": r.condition.value,
                "tone": r.tone,
                "source": r.source.value,
            }
            for r in records
        ]
    )


def records_from_frame(frame: pd.DataFrame) -> list[ImageRecord]:
    return [
        ImageRecord(
            image_id=str(row["image_id"]),
            image_path=Path(row["image_path"]),
            raw_diagnosis=str(row["raw_diagnosis"]),
            condition=Condition(row["condition"]),
            tone=int(row["tone"]),
            source=DataSource(row["source"]),
        )
        for _, row in frame.iterrows()
    ]
