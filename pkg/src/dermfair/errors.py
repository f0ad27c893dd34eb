"""Exception types shared across the package."""

from __future__ import annotations


class ConfigurationError(Exception):
    """Fatal misconfiguration: bad schema, bad weights, inconsistent options."""


class SchemaError(ConfigurationError):
    """A metadata file does not match the declared source schema."""


class UnmappedDiagnosisError(ConfigurationError):
    """One or more raw diagnosis strings have no harmonization entry."""

    def __init__(self, unmapped: list[str]):
        self.unmapped = sorted(set(unmapped))
        preview = ", ".join(repr(s) for s in self.unmapped[:20])
        more = "" if len(self.unmapped) <= 20 else f" (+{len(self.unmapped) - 20} more)"
        super().__init__(f"unmapped diagnosis strings: {preview}{more}")


class ImageReadError(Exception):
    """Record-level failure to decode an image file; goes to the rejection log."""


class NumericError(RuntimeError):
    """Fatal numeric failure (non-finite values where finiteness is required)."""


class NonFiniteLossError(NumericError):
    """Training loss became non-finite; carries the offending batch id."""

    def __init__(self, batch_id: int, epoch: int, detail: str = ""):
        self.batch_id = batch_id
        self.epoch = epoch
        msg = f"non-finite loss at epoch {epoch}, batch {batch_id}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
