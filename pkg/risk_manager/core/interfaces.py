"""Abstract interfaces for the advise service.

Service logic depends only on these protocols; the in-memory store in
risk_manager/backends/memory/ is the only implementation shipped.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Protocol

if TYPE_CHECKING:
    from risk_manager.core.harness import PipelineResult


class SnapshotStore(Protocol):
    """Holds the pipeline result the service answers from."""

    def current(self) -> PipelineResult | None:
        """Return the live result, or None before the first load."""
        ...

    def swap(self, result: PipelineResult) -> None:
        """Atomically replace the live result."""
        ...
