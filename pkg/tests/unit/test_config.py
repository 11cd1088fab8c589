"""Unit tests for environment and manifest configuration."""

from __future__ import annotations

import json

import pytest

from risk_manager.core.harness import PipelineParams
from risk_manager.core.synthetic import GeneratorSpec
from risk_manager.shared.config import (
    DEFAULT_MANIFEST,
    DEFAULT_SEED,
    LOG_LEVEL,
    MANIFEST_SECTIONS,
    SERVICE_PORT,
    check_keys,
    get_env,
    load_manifest,
)


def test_get_env_raises_when_missing(monkeypatch):
    monkeypatch.delenv("RISK_MANAGER_TEST_VALUE", raising=False)

    with pytest.raises(RuntimeError, match="RISK_MANAGER_TEST_VALUE"):
        get_env("RISK_MANAGER_TEST_VALUE")
    assert get_env("RISK_MANAGER_TEST_VALUE", "fallback") == "fallback"


def test_accessors_read_environment_lazily(monkeypatch):
    monkeypatch.setenv("RISK_MANAGER_SEED", "77")
    monkeypatch.setenv("RISK_MANAGER_PORT", "9123")
    monkeypatch.setenv("LOG_LEVEL", "debug")

    assert DEFAULT_SEED() == 77
    assert SERVICE_PORT() == 9123
    assert LOG_LEVEL() == "DEBUG"


def test_integer_accessor_rejects_garbage(monkeypatch):
    monkeypatch.setenv("RISK_MANAGER_SEED", "abc")

    with pytest.raises(ValueError, match="RISK_MANAGER_SEED"):
        DEFAULT_SEED()


def test_shipped_manifest_builds_parameters():
    sections = load_manifest(DEFAULT_MANIFEST)

    params = PipelineParams.from_manifest(sections)
    spec = GeneratorSpec.from_manifest(sections["generator"])

    assert params.algorithm == "optics"
    assert params.forest.trees == 100
    assert spec.total == 5000


def test_missing_default_manifest_gives_empty_sections(monkeypatch, tmp_path):
    monkeypatch.setenv("RISK_MANAGER_PARAMS", str(tmp_path / "absent.json"))

    assert load_manifest() == {section: {} for section in MANIFEST_SECTIONS}


def test_missing_explicit_manifest_is_an_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.json")


@pytest.mark.parametrize("payload,message", [
    ([1, 2], "JSON object"),
    ({"cluster": {}}, "unknown manifest section"),
    ({"forest": 3}, "must be an object"),
])
def test_load_manifest_rejects_bad_layout(tmp_path, payload, message):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps(payload))

    with pytest.raises(ValueError, match=message):
        load_manifest(path)


def test_check_keys_names_unknown_keys():
    with pytest.raises(ValueError, match=r"\['bogus'\]"):
        check_keys("pipeline", {"eps": 0.5, "bogus": 1}, {"eps"})
