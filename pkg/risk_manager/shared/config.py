"""Configuration helpers: environment variables plus the JSON parameter manifest."""

from __future__ import annotations

import json
import os
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_MANIFEST = REPO_ROOT / "pipeline.json"

MANIFEST_SECTIONS = ("pipeline", "forest", "generator")


def get_env(name: str, default: str | None = None) -> str:
    """Get an environment variable, raising if missing and no default."""
    value = os.environ.get(name, default)
    if value is None:
        raise RuntimeError(f"Missing required environment variable: {name}")
    return value


def _int_from_env(name: str, default: int) -> int:
    raw = get_env(name, str(default))
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"{name} must be an integer, got {raw!r}") from exc


LOG_LEVEL = lambda: get_env("LOG_LEVEL", "INFO").upper()
PIPELINE_MANIFEST = lambda: get_env("RISK_MANAGER_PARAMS", str(DEFAULT_MANIFEST))
DEFAULT_SEED = lambda: _int_from_env("RISK_MANAGER_SEED", 2023)
SERVICE_HOST = lambda: get_env("RISK_MANAGER_HOST", "127.0.0.1")
SERVICE_PORT = lambda: _int_from_env("RISK_MANAGER_PORT", 8000)


def load_manifest(manifest_path: str | Path | None = None) -> dict[str, dict]:
    """Load parameter overrides from the manifest.

    A missing default manifest yields empty sections; a missing explicit path
    is an error.
    """
    explicit = manifest_path is not None
    path = Path(manifest_path if explicit else PIPELINE_MANIFEST())
    if not path.exists():
        if explicit:
            raise FileNotFoundError(f"Parameter manifest not found: {path}")
        return {section: {} for section in MANIFEST_SECTIONS}

    with path.open() as f:
        manifest = json.load(f)
    if not isinstance(manifest, dict):
        raise ValueError(f"{path}: expected a JSON object")

    unknown = sorted(set(manifest) - set(MANIFEST_SECTIONS))
    if unknown:
        raise ValueError(f"{path}: unknown manifest section(s): {unknown}")

    sections = {}
    for section in MANIFEST_SECTIONS:
        values = manifest.get(section, {})
        if not isinstance(values, dict):
            raise ValueError(f"{path}: section {section!r} must be an object")
        sections[section] = values
    return sections


def check_keys(section: str, values: dict, allowed: set[str]) -> None:
    """Raise ValueError naming any key a manifest section does not understand."""
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ValueError(f"Manifest section {section!r}: unknown key(s) {unknown}")
