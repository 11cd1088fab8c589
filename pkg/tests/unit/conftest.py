"""Shared fixtures for unit tests: shipped fixture files and small hand-built inputs."""

import os
import sys
from datetime import date
from pathlib import Path

import pytest

# Add project root to path so risk_manager is importable
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from risk_manager.core.corpus import CveRecord, CveStatus, NodeIdentity
from risk_manager.core.harness import Feed, PipelineParams, load_feed
from risk_manager.core.predictor import ForestParams
from risk_manager.core.synthetic import GeneratorSpec, generate_synthetic_dataset

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"
AS_OF = date(2023, 6, 30)


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def as_of() -> date:
    return AS_OF


@pytest.fixture
def feed() -> Feed:
    return load_feed(
        FIXTURES / "cves.jsonl",
        FIXTURES / "catalog.json",
        FIXTURES / "epss.csv",
        FIXTURES / "exploits.csv",
    )


@pytest.fixture
def snapshot(feed):
    return feed.snapshot(AS_OF)


@pytest.fixture
def small_feed() -> Feed:
    return load_feed(FIXTURES / "small_cves.jsonl", FIXTURES / "small_catalog.json")


@pytest.fixture
def office_record() -> CveRecord:
    """Equation Editor memory corruption: old, patched, with a public exploit."""
    return CveRecord(
        id="CVE-2017-11882",
        description="Microsoft Office Memory Corruption Vulnerability",
        published_date=date(2017, 11, 15),
        last_modified=date(2017, 11, 20),
        status=CveStatus.ANALYZED,
        affected_products=frozenset({"microsoft:office:2016"}),
        patched=True,
        exploited=True,
        cvss_base=7.8,
    )


@pytest.fixture
def fast_params() -> PipelineParams:
    return PipelineParams(forest=ForestParams(trees=10), min_samples=3)


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_synthetic_dataset(GeneratorSpec(total=400), seed=7)


def make_record(cve_id: str, products, base: float | None = 5.0, **overrides) -> CveRecord:
    published = overrides.pop("published_date", date(2023, 1, 1))
    fields = {
        "id": cve_id,
        "description": overrides.pop("description", f"Vulnerability {cve_id} in a parser"),
        "published_date": published,
        "last_modified": overrides.pop("last_modified", published),
        "status": CveStatus.ANALYZED if base is not None else CveStatus.RECEIVED,
        "affected_products": frozenset(products),
        "cvss_base": base,
    }
    fields.update(overrides)
    return CveRecord(**fields)


def make_node(name: str, *products: str) -> NodeIdentity:
    return NodeIdentity(name, frozenset(products))
