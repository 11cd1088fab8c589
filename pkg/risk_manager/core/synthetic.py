"""Seeded generator for desk-scale vulnerability datasets.

Descriptions carry score-correlated signal tokens so the predictor has
something to learn, plus a share of planted duplicate descriptions filed
under different operating systems for the clustering stage to find.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np
from sklearn.preprocessing import normalize
from sklearn.random_projection import GaussianRandomProjection

from risk_manager.core.corpus import CveRecord, CveStatus, CvssVersion, EpssEntry, NodeIdentity
from risk_manager.core.errors import ParameterError
from risk_manager.core.textfeat import FeatureVector, build_vocabulary, tfidf_matrix

logger = logging.getLogger(__name__)

# family -> (vendor:product prefix, display name, versions)
DEFAULT_FAMILIES: dict[str, tuple[str, str, tuple[str, ...]]] = {
    "windows": ("microsoft:windows", "Microsoft Windows", ("10", "11")),
    "fedora": ("fedoraproject:fedora", "Fedora", ("37", "38")),
    "ubuntu": ("canonical:ubuntu_linux", "Ubuntu Linux", ("20.04", "22.04")),
    "centos": ("centos:centos", "CentOS", ("7", "8")),
    "debian": ("debian:debian_linux", "Debian GNU/Linux", ("11", "12")),
    "opensuse": ("opensuse:leap", "openSUSE Leap", ("15.4", "15.5")),
    "solaris": ("oracle:solaris", "Oracle Solaris", ("11.4",)),
    "openbsd": ("openbsd:openbsd", "OpenBSD", ("7.3",)),
    "freebsd": ("freebsd:freebsd", "FreeBSD", ("13.1", "13.2")),
}

DEFAULT_SHARED_SOFTWARE: dict[str, tuple[str, ...]] = {
    "openssl:openssl:3.0": ("fedora-38", "ubuntu-22.04", "centos-8", "debian-12", "opensuse-15.5", "freebsd-13.2"),
    "openssl:openssl:1.1.1": ("fedora-37", "ubuntu-20.04", "centos-7", "debian-11", "opensuse-15.4", "freebsd-13.1"),
    "apache:http_server:2.4": ("ubuntu-20.04", "ubuntu-22.04", "debian-11", "debian-12", "centos-7", "centos-8"),
    "mozilla:firefox:115": ("windows-10", "windows-11", "fedora-38", "ubuntu-22.04"),
    "samba:samba:4.17": ("debian-12", "fedora-37", "opensuse-15.5", "solaris-11.4"),
    "openbsd:openssh:9.3": ("openbsd-7.3", "freebsd-13.2", "solaris-11.4", "windows-11"),
}

_SOFTWARE_NAMES = {
    "openssl": "OpenSSL",
    "http_server": "Apache HTTP Server",
    "firefox": "Mozilla Firefox",
    "samba": "Samba",
    "openssh": "OpenSSH",
}

# One pool per unit score bin, 0 through 9. Pools are disjoint.
DEFAULT_SIGNAL_TOKENS: tuple[tuple[str, ...], ...] = (
    ("banner", "cosmetic", "tooltip", "favicon", "typo", "placeholder"),
    ("verbose", "timing", "fingerprint", "enumeration", "header", "metadata"),
    ("clickjacking", "referrer", "autocomplete", "caching", "mixed", "cookie"),
    ("redirect", "spoofing", "tabnabbing", "csrf", "hostname", "locale"),
    ("reflected", "traversal", "symlink", "tempfile", "logfile", "whitespace"),
    ("stored", "deserialization", "ldap", "xpath", "ssrf", "template"),
    ("race", "toctou", "nullptr", "assertion", "exhaustion", "recursion"),
    ("heap", "overflow", "corruption", "underflow", "outofbounds", "kernel"),
    ("useafterfree", "doublefree", "sandbox", "escalation", "privileged", "setuid"),
    ("unauthenticated", "wormable", "remote", "preauth", "rce", "hypervisor"),
)

DEFAULT_NOISE_TOKENS: tuple[str, ...] = (
    "component", "function", "module", "request", "handler", "parser", "service",
    "daemon", "library", "driver", "interface", "plugin", "endpoint", "packet",
    "message", "buffer", "session", "configuration", "attacker", "user", "crafted",
    "input", "file", "network", "local", "application", "process", "memory",
    "string", "object", "pointer", "stream", "socket", "protocol", "parameter",
)

# Majority bin 7 keeps the shuffled-label baseline well away from the others.
DEFAULT_BIN_WEIGHTS = (0.02, 0.03, 0.05, 0.08, 0.10, 0.12, 0.10, 0.35, 0.10, 0.05)


@dataclass(frozen=True)
class GeneratorSpec:
    total: int = 5000
    families: Mapping[str, tuple[str, str, tuple[str, ...]]] = field(default_factory=lambda: dict(DEFAULT_FAMILIES))
    shared_software: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_SHARED_SOFTWARE))
    start: date = date(2018, 1, 1)
    end: date = date(2023, 12, 31)
    bin_weights: Sequence[float] = DEFAULT_BIN_WEIGHTS
    signal_tokens: Sequence[Sequence[str]] = DEFAULT_SIGNAL_TOKENS
    noise_tokens: Sequence[str] = DEFAULT_NOISE_TOKENS
    received_fraction: float = 0.1
    patched_fraction: float = 0.5
    exploited_fraction: float = 0.1
    software_fraction: float = 0.25
    epss_coverage: float = 0.9
    analysis_lag_days: tuple[int, int] = (0, 60)
    duplicate_fraction: float = 0.03

    def __post_init__(self):
        if self.total <= 0:
            raise ParameterError(f"total must be positive, got {self.total}")
        if not self.families:
            raise ParameterError("at least one OS family is required")
        for name, (_, _, versions) in self.families.items():
            if not versions:
                raise ParameterError(f"family {name!r} has no versions")
        if self.end < self.start:
            raise ParameterError("end date precedes start date")
        if len(self.bin_weights) != len(self.signal_tokens):
            raise ParameterError("bin_weights and signal_tokens must have one entry per bin")
        if any(w < 0 for w in self.bin_weights) or sum(self.bin_weights) <= 0:
            raise ParameterError("bin_weights must be non-negative with a positive sum")
        for name in ("received_fraction", "patched_fraction", "exploited_fraction",
                     "software_fraction", "epss_coverage", "duplicate_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {value}")
        low, high = self.analysis_lag_days
        if low < 0 or high < low:
            raise ParameterError(f"invalid analysis_lag_days {self.analysis_lag_days}")

    @classmethod
    def from_manifest(cls, values: Mapping) -> GeneratorSpec:
        overrides = dict(values)
        for key in ("start", "end"):
            if key in overrides:
                overrides[key] = date.fromisoformat(overrides[key])
        if "analysis_lag_days" in overrides:
            overrides["analysis_lag_days"] = tuple(overrides["analysis_lag_days"])
        return cls(**overrides)


@dataclass(frozen=True)
class SyntheticDataset:
    records: list[CveRecord]
    epss: list[EpssEntry]
    catalog: frozenset[NodeIdentity]
    hidden_scores: dict[str, float]


def build_catalog(spec: GeneratorSpec) -> tuple[frozenset[NodeIdentity], dict[str, str]]:
    """Node catalog plus a display name for every product key."""
    products: dict[str, set[str]] = {}
    display: dict[str, str] = {}
    for family, (prefix, label, versions) in spec.families.items():
        for version in versions:
            key = f"{prefix}:{version}"
            products[f"{family}-{version}"] = {key}
            display[key] = f"{label} {version}"

    for key, node_names in spec.shared_software.items():
        _, product, version = key.split(":", 2)
        display[key] = f"{_SOFTWARE_NAMES.get(product, product)} {version}"
        for name in node_names:
            if name not in products:
                raise ParameterError(f"shared software {key} names unknown node {name!r}")
            products[name].add(key)

    catalog = frozenset(NodeIdentity(name, frozenset(keys)) for name, keys in products.items())
    return catalog, display


def _draw_score(rng: np.random.Generator, bin_index: int, last_bin: int) -> float:
    tenths = int(rng.integers(0, 11 if bin_index == last_bin else 10))
    return round(bin_index + tenths / 10, 1)


def _describe(rng: np.random.Generator, spec: GeneratorSpec, bin_index: int, product: str) -> str:
    signal = list(rng.choice(spec.signal_tokens[bin_index], size=3, replace=False))
    noise = list(rng.choice(spec.noise_tokens, size=4, replace=False))
    return (
        f"{signal[0].capitalize()} {signal[1]} issue in the {noise[0]} {noise[1]} of {product} "
        f"allows a {noise[2]} {signal[2]} through a crafted {noise[3]}."
    )


def generate_synthetic_dataset(spec: GeneratorSpec, seed: int) -> SyntheticDataset:
    """Generate records, EPSS entries and the catalog, deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    catalog, display = build_catalog(spec)
    os_keys = sorted(k for node in catalog for k in node.product_keys if k not in spec.shared_software)
    software_keys = sorted(spec.shared_software)
    family_of = {f"{prefix}:{version}": family
                 for family, (prefix, _, versions) in spec.families.items() for version in versions}

    weights = np.asarray(spec.bin_weights, dtype=float)
    weights = weights / weights.sum()
    last_bin = len(weights) - 1
    span_days = (spec.end - spec.start).days

    group_count = int(round(spec.total * spec.duplicate_fraction / 3))
    if len({family_of[k] for k in os_keys}) < 3:
        group_count = 0
    single_count = spec.total - 3 * group_count
    if single_count < 0:
        group_count, single_count = spec.total // 3, spec.total % 3

    drafts: list[dict] = []
    for _ in range(single_count):
        bin_index = int(rng.choice(len(weights), p=weights))
        if software_keys and rng.random() < spec.software_fraction:
            products = [software_keys[int(rng.integers(len(software_keys)))]]
        else:
            products = [os_keys[int(rng.integers(len(os_keys)))]]
        drafts.append({
            "bin": bin_index,
            "products": products,
            "description": _describe(rng, spec, bin_index, display[products[0]]),
            "published": spec.start + timedelta(days=int(rng.integers(0, span_days + 1))),
        })

    for _ in range(group_count):
        # same flaw filed separately against three different OS families
        bin_index = int(rng.choice(len(weights), p=weights))
        template = _describe(rng, spec, bin_index, "{product}")
        families = rng.choice(sorted(set(family_of.values())), size=3, replace=False)
        published = spec.start + timedelta(days=int(rng.integers(0, span_days + 1)))
        for family in families:
            candidates = [k for k in os_keys if family_of[k] == family]
            key = candidates[int(rng.integers(len(candidates)))]
            drafts.append({
                "bin": bin_index,
                "products": [key],
                "description": template.replace("{product}", display[key]),
                "published": published + timedelta(days=int(rng.integers(0, 30))),
            })

    drafts = [d for d in drafts if d["published"] <= spec.end] + [
        {**d, "published": spec.end} for d in drafts if d["published"] > spec.end
    ]
    order = sorted(range(len(drafts)), key=lambda i: (drafts[i]["published"], i))

    records: list[CveRecord] = []
    hidden: dict[str, float] = {}
    probabilities: list[tuple[str, float]] = []
    per_year: dict[int, int] = {}
    lag_low, lag_high = spec.analysis_lag_days

    for i in order:
        draft = drafts[i]
        published: date = draft["published"]
        per_year[published.year] = per_year.get(published.year, 0) + 1
        cve_id = f"CVE-{published.year}-{10000 + per_year[published.year]}"

        score = _draw_score(rng, draft["bin"], last_bin)
        received = rng.random() < spec.received_fraction
        patched = bool(rng.random() < spec.patched_fraction)
        exploited = bool(rng.random() < spec.exploited_fraction)
        lag = int(rng.integers(lag_low, lag_high + 1))

        if received:
            hidden[cve_id] = score
            records.append(CveRecord(
                id=cve_id,
                description=draft["description"],
                published_date=published,
                last_modified=published,
                status=CveStatus.RECEIVED,
                affected_products=frozenset(draft["products"]),
                patched=patched,
                exploited=exploited,
            ))
        else:
            records.append(CveRecord(
                id=cve_id,
                description=draft["description"],
                published_date=published,
                last_modified=published + timedelta(days=lag),
                status=CveStatus.ANALYZED,
                affected_products=frozenset(draft["products"]),
                patched=patched,
                exploited=exploited,
                cvss_base=score,
                cvss_version=CvssVersion.V3,
            ))

        if rng.random() < spec.epss_coverage:
            raw = rng.beta(5.0, 2.0) if exploited else rng.beta(0.5, 20.0)
            probabilities.append((cve_id, round(float(raw), 5)))

    epss = _epss_entries(probabilities, spec.end)
    logger.info(
        "Generated %d records (%d received, %d planted duplicate groups) over %d nodes",
        len(records), len(hidden), group_count, len(catalog),
    )
    return SyntheticDataset(records=records, epss=epss, catalog=catalog, hidden_scores=hidden)


def _epss_entries(probabilities: list[tuple[str, float]], model_date: date) -> list[EpssEntry]:
    if not probabilities:
        return []
    values = np.array([p for _, p in probabilities])
    ranks = np.searchsorted(np.sort(values), values, side="right")
    return [
        EpssEntry(cve_id, prob, round(float(rank) / len(values), 5), model_date)
        for (cve_id, prob), rank in zip(probabilities, ranks)
    ]


def synthetic_embeddings(records: Sequence[CveRecord], dimension: int, seed: int) -> dict[str, FeatureVector]:
    """Dense stand-in sentence embeddings: a seeded Gaussian projection of TF-IDF vectors."""
    if dimension < 1:
        raise ParameterError(f"dimension must be positive, got {dimension}")
    if not records:
        return {}
    descriptions = [r.description for r in records]
    vocab = build_vocabulary(descriptions, min_df=1)
    projector = GaussianRandomProjection(n_components=dimension, random_state=seed)
    projected = np.asarray(projector.fit_transform(tfidf_matrix(descriptions, vocab)), dtype=float)
    projected = normalize(projected, norm="l2")
    return {record.id: FeatureVector(row.copy()) for record, row in zip(records, projected)}
