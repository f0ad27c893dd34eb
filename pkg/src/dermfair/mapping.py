"""Diagnosis harmonization: raw free-text labels to the four task labels.

The mapping is shipped as editable two-column CSV files (one per source
dataset) rather than code, so curation fixes never require a release. A
mapping must be total over the manifest it is applied to: any raw diagnosis
without an entry aborts ingestion with the offending strings listed.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from dermfair.errors import ConfigurationError, UnmappedDiagnosisError
from dermfair.records import Condition, DataSource

_WS = re.compile(r"\s+")

_BUNDLED_FILES = {
    DataSource.FITZPATRICK17K: "fitzpatrick17k.csv",
    DataSource.PADUFES: "padufes.csv",
    DataSource.SCIN: "scin.csv",
    DataSource.SYNTHETIC: "synthetic.csv",
}


def normalize_diagnosis(raw: str) -> str:
    """Lowercase, trim, and collapse internal whitespace."""
    return _WS.sub(" ", raw.strip().lower())


@dataclass
class DiagnosisMapping:
    """Total mapping from normalized diagnosis strings to task labels."""

    entries: dict[str, Condition] = field(default_factory=dict)
    origin: str = "<memory>"

    @classmethod
    def from_file(cls, path: str | Path) -> "DiagnosisMapping":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"mapping file not found: {path}")
        return cls._parse(path.read_text(encoding="utf-8"), origin=str(path))

    @classmethod
    def _parse(cls, text: str, origin: str) -> "DiagnosisMapping":
        entries: dict[str, Condition] = {}
        reader = csv.reader(io.StringIO(text))
        for lineno, row in enumerate(reader, start=1):
            if not row or (row[0].strip().startswith("#")):
                continue
            if len(row) != 2:
                raise ConfigurationError(
                    f"{origin}:{lineno}: expected two columns (diagnosis, target), got {row!r}"
                )
            key = normalize_diagnosis(row[0])
            target = row[1].strip().lower()
            if not key:
                raise ConfigurationError(f"{origin}:{lineno}: empty diagnosis string")
            try:
                condition = Condition(target)
            except ValueError:
                valid = ", ".join(c.value for c in Condition)
                raise ConfigurationError(
                    f"{origin}:{lineno}: unknown target {target!r} (valid: {valid})"
                ) from None
            if key in entries and entries[key] is not condition:
                raise ConfigurationError(
                    f"{origin}:{lineno}: conflicting entries for {key!r}"
                )
            entries[key] = condition
        return cls(entries=entries, origin=origin)

    def harmonize(self, raw: str) -> Condition:
        """Map one raw diagnosis to its task label (possibly EXCLUDED).

        Pure and deterministic in (normalized raw, mapping). Raises
        UnmappedDiagnosisError when no entry exists and ValueError when the
        string is empty after normalization.
        """
        key = normalize_diagnosis(raw)
        if not key:
            raise ValueError("diagnosis string is empty after normalization")
        try:
            return self.entries[key]
        except KeyError:
            raise UnmappedDiagnosisError([key]) from None

    def missing(self, raw_values) -> list[str]:
        """Normalized strings from ``raw_values`` that have no entry."""
        seen = {normalize_diagnosis(v) for v in raw_values}
        return sorted(k for k in seen if k and k not in self.entries)

    def validate_total(self, raw_values) -> None:
        """Raise UnmappedDiagnosisError unless every value has an entry."""
        missing = self.missing(raw_values)
        if missing:
            raise UnmappedDiagnosisError(missing)


def bundled_mapping(source: DataSource) -> DiagnosisMapping:
    """Load the mapping file shipped with the package for ``source``."""
    filename = _BUNDLED_FILES[source]
    text = resources.files("dermfair.mappings").joinpath(filename).read_text(encoding="utf-8")
    return DiagnosisMapping._parse(text, origin=f"bundled:{filename}")
