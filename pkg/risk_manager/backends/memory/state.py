"""In-memory snapshot store."""

from __future__ import annotations

import logging
import threading

from risk_manager.core.harness import PipelineResult

logger = logging.getLogger(__name__)


class InMemorySnapshotStore:
    def __init__(self, result: PipelineResult | None = None):
        self._lock = threading.Lock()
        self._result = result

    def current(self) -> PipelineResult | None:
        with self._lock:
            return self._result

    def swap(self, result: PipelineResult) -> None:
        with self._lock:
            previous, self._result = self._result, result
        logger.info(
            "Swapped snapshot %s -> %s",
            previous.snapshot.snapshot_id if previous else None,
            result.snapshot.snapshot_id,
        )
