"""Replica configuration ranking.

The security risk of a configuration sums the assessed scores of every CVE
on every node; the resilience risk sums the scores of CVEs shared by each
pair of nodes, either through affected products or through description
clusters. All sums run in a fixed order (ascending CVE id within a node or
pair, then nodes and pairs in name order) so results are bit-reproducible.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import IO

from risk_manager.core.cluster import ClusterAssignment, shared_groups
from risk_manager.core.corpus import CorpusSnapshot, NodeIdentity
from risk_manager.core.errors import MissingAssessmentError, ParameterError
from risk_manager.core.scoring import SCORE_FIELDS, AssessedScore

logger = logging.getLogger(__name__)

RANKING_VERSION = 1
SHARED_BY_PRODUCTS = "products"
SHARED_BY_CLUSTER = "cluster"


@dataclass(frozen=True)
class Configuration:
    nodes: tuple[NodeIdentity, ...]

    def __post_init__(self):
        names = [node.name for node in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate node names in configuration: {names}")
        if names != sorted(names):
            object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.name)))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(node.name for node in self.nodes)


@dataclass(frozen=True)
class RiskReport:
    configuration: Configuration
    security: float
    resilience: float
    shared_detail: Mapping[tuple[str, str], Mapping[str, str]] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class RankedConfiguration:
    rank: int
    report: RiskReport

    @property
    def names(self) -> tuple[str, ...]:
        return self.report.configuration.names

    @property
    def security(self) -> float:
        return self.report.security

    @property
    def resilience(self) -> float:
        return self.report.resilience


@dataclass(frozen=True)
class Policy:
    kind: str = "resilience_first"
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("resilience_first", "security_first", "weighted"):
            raise ParameterError(f"unknown policy {self.kind!r}")
        if self.kind == "weighted":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ParameterError(f"weighted policy needs alpha in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ParameterError(f"policy {self.kind} takes no alpha")

    @classmethod
    def parse(cls, text: str, alpha: float | None = None) -> Policy:
        """Accept ``resilience_first``, ``security_first``, ``weighted:<alpha>`` or ``weighted`` plus alpha."""
        kind, _, raw_alpha = text.partition(":")
        if raw_alpha:
            try:
                alpha = float(raw_alpha)
            except ValueError as exc:
                raise ParameterError(f"invalid alpha in policy {text!r}") from exc
        return cls(kind, alpha if kind == "weighted" else None)

    def __str__(self) -> str:
        return f"weighted:{self.alpha!r}" if self.kind == "weighted" else self.kind

    def sort_key(self, report: RiskReport) -> tuple:
        names = report.configuration.names
        if self.kind == "resilience_first":
            return (report.resilience, report.security, names)
        if self.kind == "security_first":
            return (report.security, report.resilience, names)
        return (self.alpha * report.resilience + (1.0 - self.alpha) * report.security, names)


def vulnerabilities_of(node: NodeIdentity, snapshot: CorpusSnapshot) -> set[str]:
    """CVEs whose affected products intersect the node's installed products."""
    return {
        cve_id
        for cve_id, record in snapshot.records.items()
        if not record.affected_products.isdisjoint(node.product_keys)
    }


def _cluster_shared(groups: Sequence[frozenset[str]], hits_a: set[str], hits_b: set[str]) -> set[str]:
    shared: set[str] = set()
    for group in groups:
        on_a, on_b = group & hits_a, group & hits_b
        if on_a and on_b:
            shared |= on_a | on_b
    return shared


def shared_vulnerabilities(
    a: NodeIdentity,
    b: NodeIdentity,
    snapshot: CorpusSnapshot,
    clusters: ClusterAssignment | None = None,
) -> set[str]:
    if a.name == b.name:
        raise ValueError(f"a node cannot share vulnerabilities with itself ({a.name})")
    hits_a, hits_b = vulnerabilities_of(a, snapshot), vulnerabilities_of(b, snapshot)
    groups = shared_groups(clusters) if clusters is not None else []
    return (hits_a & hits_b) | _cluster_shared(groups, hits_a, hits_b)


def _ordered_sum(values: Iterable[float]) -> float:
    total = 0.0
    for value in values:
        total += value
    return total


class RiskIndex:
    """Cached per-node and per-pair subtotals over a node catalog."""

    def __init__(
        self,
        assessed: Mapping[str, AssessedScore],
        snapshot: CorpusSnapshot,
        clusters: ClusterAssignment | None = None,
        score_field: str = "hal",
        nodes: Iterable[NodeIdentity] | None = None,
    ):
        if score_field not in SCORE_FIELDS:
            raise ParameterError(f"unknown score field {score_field!r}; expected one of {SCORE_FIELDS}")
        self.score_field = score_field
        self.nodes = sorted(nodes if nodes is not None else snapshot.catalog, key=lambda n: n.name)

        by_product: dict[str, set[str]] = {}
        for cve_id, record in snapshot.records.items():
            for key in record.affected_products:
                by_product.setdefault(key, set()).add(cve_id)

        self.hits: dict[str, set[str]] = {}
        for node in self.nodes:
            found: set[str] = set()
            for key in node.product_keys:
                found |= by_product.get(key, set())
            self.hits[node.name] = found

        relevant = set().union(*self.hits.values()) if self.hits else set()
        missing = relevant - set(assessed)
        if missing:
            raise MissingAssessmentError("CVEs on catalog nodes have no assessment", missing)

        self._score = {cve_id: assessed[cve_id].value(score_field) for cve_id in relevant}
        self.node_totals = {
            name: _ordered_sum(self._score[c] for c in sorted(found)) for name, found in self.hits.items()
        }

        groups = shared_groups(clusters) if clusters is not None else []
        self.pair_detail: dict[tuple[str, str], dict[str, str]] = {}
        self.pair_totals: dict[tuple[str, str], float] = {}
        for a, b in combinations([node.name for node in self.nodes], 2):
            hits_a, hits_b = self.hits[a], self.hits[b]
            by_products = hits_a & hits_b
            detail = {c: SHARED_BY_PRODUCTS for c in by_products}
            for c in _cluster_shared(groups, hits_a, hits_b) - by_products:
                detail[c] = SHARED_BY_CLUSTER
            self.pair_detail[(a, b)] = {c: detail[c] for c in sorted(detail)}
            self.pair_totals[(a, b)] = _ordered_sum(self._score[c] for c in sorted(detail))

    def security(self, config: Configuration) -> float:
        return _ordered_sum(self.node_totals[name] for name in config.names)

    def resilience(self, config: Configuration) -> float:
        return _ordered_sum(self.pair_totals[pair] for pair in combinations(config.names, 2))


def evaluate_configuration(config: Configuration, index: RiskIndex, explain: bool = False) -> RiskReport:
    unknown = [name for name in config.names if name not in index.node_totals]
    if unknown:
        raise ValueError(f"nodes not in the risk index: {unknown}")
    detail = {pair: index.pair_detail[pair] for pair in combinations(config.names, 2)} if explain else {}
    return RiskReport(config, index.security(config), index.resilience(config), detail)


def security_risk(
    config: Configuration,
    assessed: Mapping[str, AssessedScore],
    snapshot: CorpusSnapshot,
    score_field: str = "hal",
) -> float:
    """Sum of node scores; a CVE on k nodes counts k times."""
    return RiskIndex(assessed, snapshot, None, score_field, nodes=config.nodes).security(config)


def resil_risk(
    config: Configuration,
    assessed: Mapping[str, AssessedScore],
    snapshot: CorpusSnapshot,
    clusters: ClusterAssignment | None = None,
    score_field: str = "hal",
) -> float:
    """Sum over unordered node pairs of the scores of their shared CVEs."""
    return RiskIndex(assessed, snapshot, clusters, score_field, nodes=config.nodes).resilience(config)


def enumerate_configurations(catalog: Iterable[NodeIdentity], n: int) -> Iterator[Configuration]:
    """All n-node combinations in lexicographic name order, generated lazily."""
    nodes = sorted(catalog, key=lambda node: node.name)
    if not 1 <= n <= len(nodes):
        raise ParameterError(f"n must be between 1 and {len(nodes)}, got {n}")
    return (Configuration(tuple(combo)) for combo in combinations(nodes, n))


def advise(
    catalog: Iterable[NodeIdentity],
    n: int,
    policy: Policy,
    assessed: Mapping[str, AssessedScore],
    snapshot: CorpusSnapshot,
    clusters: ClusterAssignment | None = None,
    score_field: str = "hal",
    explain: bool = False,
) -> list[RankedConfiguration]:
    """Every n-node configuration, best first under ``policy``."""
    nodes = sorted(catalog, key=lambda node: node.name)
    configurations = enumerate_configurations(nodes, n)
    index = RiskIndex(assessed, snapshot, clusters, score_field, nodes=nodes)
    reports = [evaluate_configuration(config, index, explain) for config in configurations]
    reports.sort(key=policy.sort_key)
    logger.info("Ranked %d configurations of %d nodes (policy %s)", len(reports), n, policy)
    return [RankedConfiguration(rank, report) for rank, report in enumerate(reports, start=1)]


def configuration_count(catalog_size: int, n: int) -> int:
    return comb(catalog_size, n)


def ranking_to_dict(
    ranking: Sequence[RankedConfiguration],
    policy: Policy,
    n: int,
    top: int | None = None,
    explain: bool = False,
) -> dict:
    entries = []
    for item in ranking[:top] if top is not None else ranking:
        entry = {
            "rank": item.rank,
            "nodes": list(item.names),
            "security": item.security,
            "resilience": item.resilience,
        }
        if explain:
            entry["shared"] = {
                f"{a}|{b}": dict(detail) for (a, b), detail in item.report.shared_detail.items()
            }
        entries.append(entry)
    return {"version": RANKING_VERSION, "policy": str(policy), "n": n, "ranking": entries}


def ranking_to_json(
    ranking: Sequence[RankedConfiguration],
    policy: Policy,
    n: int,
    stream: IO[str],
    explain: bool = False,
) -> None:
    json.dump(ranking_to_dict(ranking, policy, n, explain=explain), stream, indent=2)
    stream.write("\n")


def ranking_to_csv(ranking: Sequence[RankedConfiguration], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["rank", "nodes", "security", "resilience"])
    for item in ranking:
        writer.writerow([item.rank, ";".join(item.names), repr(item.security), repr(item.resilience)])
