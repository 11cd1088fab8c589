"""E2E fixtures: a live advise server on a random port."""

from __future__ import annotations

import os
import sys
from datetime import date
from pathlib import Path

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from risk_manager.backends.http.server import AdviseServer
from risk_manager.backends.memory.state import InMemorySnapshotStore
from risk_manager.core.harness import PipelineParams, load_feed
from risk_manager.core.service import ServiceContext

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


@pytest.fixture(scope="session")
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def advise_server():
    """Start an empty advise server over the small catalog; tests post snapshots to it."""
    feed = load_feed(FIXTURES / "small_cves.jsonl", FIXTURES / "small_catalog.json")
    context = ServiceContext(base=feed, params=PipelineParams(nodes=2), as_of=date(2023, 6, 30))
    server = AdviseServer(InMemorySnapshotStore(), context)
    server.start()
    yield server
    server.stop()
