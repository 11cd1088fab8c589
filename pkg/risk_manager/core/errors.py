"""Error types shared by the core modules.

All of them are ValueErrors, so callers that already treat ValueError as
"bad input" keep working.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Input data violates a record invariant."""

    def __init__(self, message: str, *, line: int | None = None):
        self.detail = message
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class FeedFormatError(ValidationError):
    """Input file does not have the expected layout."""


class ParameterError(ValueError):
    """A caller-supplied parameter is out of range."""


class MissingAssessmentError(ValueError):
    """Some CVEs needed a score that nobody supplied."""

    def __init__(self, message: str, cve_ids):
        self.cve_ids = tuple(sorted(cve_ids))
        super().__init__(f"{message}: {', '.join(self.cve_ids)}")


class NoSnapshotError(RuntimeError):
    """The advise service has not loaded a snapshot yet."""
