"""Description clustering: groups CVEs that describe the same flaw.

All algorithms run on a precomputed cosine distance matrix over points
sorted by CVE id, so results do not depend on input order.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import IO

import numpy as np
from sklearn.cluster import DBSCAN, KMeans, cluster_optics_xi, compute_optics_graph, kmeans_plusplus

from risk_manager.core.errors import ParameterError
from risk_manager.core.textfeat import FeatureVector, cosine_distance_matrix, stack

logger = logging.getLogger(__name__)

ALGORITHMS = ("dbscan", "optics", "kmeans")
NOISE = -1
# cosine distance between descriptions with no term in common
UNRELATED_DISTANCE = 1.0
KMEANS_MAX_ITER = 300
KMEANS_REL_TOL = 1e-4


@dataclass(frozen=True)
class ClusterParams:
    algorithm: str = "optics"
    eps: float = 0.5
    min_samples: int = 5
    xi: float = 0.05
    k: int = 8
    seed: int = 2023

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ParameterError(f"unknown clustering algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: Mapping[str, int] = field(hash=False)
    algorithm: str
    params: Mapping[str, float] = field(hash=False)
    reachability: tuple[tuple[str, float], ...] | None = None
    core_ids: frozenset[str] | None = None
    inertia: float | None = None

    @property
    def cluster_count(self) -> int:
        return len({label for label in self.labels.values() if label != NOISE})


def _sorted_points(points: Sequence[tuple[str, FeatureVector]]) -> tuple[list[str], np.ndarray]:
    if not points:
        raise ParameterError("cannot cluster an empty point set")
    ordered = sorted(points, key=lambda point: point[0])
    ids = [cve_id for cve_id, _ in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate point ids")
    return ids, stack([vector for _, vector in ordered])


def canonical_labels(raw: Sequence[int]) -> list[int]:
    """Renumber non-noise labels by first appearance."""
    mapping: dict[int, int] = {}
    out = []
    for label in raw:
        label = int(label)
        if label == NOISE:
            out.append(NOISE)
            continue
        if label not in mapping:
            mapping[label] = len(mapping)
        out.append(mapping[label])
    return out


def dbscan_distances(ids: Sequence[str], distances: np.ndarray, eps: float, min_samples: int) -> ClusterAssignment:
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if min_samples < 1:
        raise ParameterError(f"min_samples must be >= 1, got {min_samples}")
    if not ids:
        raise ParameterError("cannot cluster an empty point set")

    model = DBSCAN(eps=eps, min_samples=min_samples, metric="precomputed").fit(distances)
    labels = canonical_labels(model.labels_)
    return ClusterAssignment(
        labels=dict(zip(ids, labels)),
        algorithm="dbscan",
        params={"eps": eps, "min_samples": min_samples},
        core_ids=frozenset(ids[i] for i in model.core_sample_indices_),
    )


def dbscan(points: Sequence[tuple[str, FeatureVector]], eps: float, min_samples: int) -> ClusterAssignment:
    """Density clustering over cosine distance; a point counts itself as a neighbour."""
    ids, matrix = _sorted_points(points)
    return dbscan_distances(ids, cosine_distance_matrix(matrix), eps, min_samples)


def optics_distances(ids: Sequence[str], distances: np.ndarray, min_samples: int, xi: float) -> ClusterAssignment:
    if not 0.0 < xi < 1.0:
        raise ParameterError(f"xi must be in (0, 1), got {xi}")
    if min_samples < 2:
        raise ParameterError(f"min_samples must be >= 2, got {min_samples}")
    if not ids:
        raise ParameterError("cannot cluster an empty point set")

    params = {"min_samples": min_samples, "xi": xi}
    n = len(ids)
    if n < min_samples:
        return ClusterAssignment(
            labels={cve_id: NOISE for cve_id in ids},
            algorithm="optics",
            params=params,
            reachability=tuple((cve_id, math.inf) for cve_id in ids),
        )

    ordering, _, reachability, predecessor = compute_optics_graph(
        distances,
        min_samples=min_samples,
        max_eps=np.inf,
        metric="precomputed",
        p=2,
        metric_params=None,
        algorithm="brute",
        leaf_size=30,
        n_jobs=None,
    )
    _, clusters = cluster_optics_xi(
        reachability=reachability,
        predecessor=predecessor,
        ordering=ordering,
        min_samples=min_samples,
        xi=xi,
    )

    # the whole-ordering span only counts when its interior is xi-steep below unrelated text
    interior = reachability[ordering][1:]
    dense_root = bool(np.all(interior <= UNRELATED_DISTANCE * (1.0 - xi)))
    by_position = np.full(n, NOISE, dtype=int)
    next_label = 0
    for start, end in clusters:
        if start == 0 and end == n - 1 and not dense_root:
            continue
        if np.any(by_position[start:end + 1] != NOISE):
            continue
        by_position[start:end + 1] = next_label
        next_label += 1

    raw = np.full(n, NOISE, dtype=int)
    raw[ordering] = by_position
    labels = canonical_labels(raw)
    return ClusterAssignment(
        labels=dict(zip(ids, labels)),
        algorithm="optics",
        params=params,
        reachability=tuple((ids[i], float(reachability[i])) for i in ordering),
    )


def optics(points: Sequence[tuple[str, FeatureVector]], min_samples: int, xi: float) -> ClusterAssignment:
    """OPTICS ordering with unbounded eps and xi-steep cluster extraction."""
    ids, matrix = _sorted_points(points)
    return optics_distances(ids, cosine_distance_matrix(matrix), min_samples, xi)


def lloyd(
    matrix: np.ndarray,
    centers: np.ndarray,
    max_iter: int = KMEANS_MAX_ITER,
    rel_tol: float = KMEANS_REL_TOL,
) -> tuple[KMeans, int]:
    """Lloyd steps from ``centers`` until inertia improves by less than ``rel_tol`` of its previous value."""
    previous = math.inf
    for iteration in range(1, max_iter + 1):
        step = KMeans(n_clusters=len(centers), init=centers, n_init=1, max_iter=1, tol=0.0, algorithm="lloyd")
        step.fit(matrix)
        centers = step.cluster_centers_
        if math.isfinite(previous) and (previous == 0.0 or abs(previous - step.inertia_) < rel_tol * previous):
            break
        previous = step.inertia_
    return step, iteration


def kmeans_baseline(points: Sequence[tuple[str, FeatureVector]], k: int, seed: int) -> ClusterAssignment:
    ids, matrix = _sorted_points(points)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k > len(ids):
        raise ParameterError(f"k={k} exceeds the number of points ({len(ids)})")

    centers, _ = kmeans_plusplus(matrix, k, random_state=seed)
    model, iterations = lloyd(matrix, centers)
    logger.debug("k-means settled after %d iterations", iterations)
    return ClusterAssignment(
        labels=dict(zip(ids, canonical_labels(model.labels_))),
        algorithm="kmeans",
        params={"k": k, "seed": seed},
        inertia=float(model.inertia_),
    )


def run_clustering(points: Sequence[tuple[str, FeatureVector]], params: ClusterParams) -> ClusterAssignment:
    logger.info("Clustering %d descriptions with %s", len(points), params.algorithm)
    if params.algorithm == "dbscan":
        assignment = dbscan(points, params.eps, params.min_samples)
    elif params.algorithm == "optics":
        assignment = optics(points, params.min_samples, params.xi)
    else:
        assignment = kmeans_baseline(points, min(params.k, len(points)), params.seed)
    logger.info("Found %d clusters", assignment.cluster_count)
    return assignment


def shared_groups(assignment: ClusterAssignment) -> list[frozenset[str]]:
    """Clusters with at least two members, in label order; noise excluded."""
    members: dict[int, set[str]] = {}
    for cve_id, label in assignment.labels.items():
        if label != NOISE:
            members.setdefault(label, set()).add(cve_id)
    return [frozenset(members[label]) for label in sorted(members) if len(members[label]) >= 2]


def export_assignment_csv(assignment: ClusterAssignment, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["cve_id", "label"])
    for cve_id in sorted(assignment.labels):
        writer.writerow([cve_id, assignment.labels[cve_id]])


def export_reachability_csv(assignment: ClusterAssignment, stream: IO[str]) -> None:
    if assignment.reachability is None:
        raise ValueError(f"{assignment.algorithm} assignments carry no reachability")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["order", "cve_id", "reachability"])
    for order, (cve_id, value) in enumerate(assignment.reachability):
        writer.writerow([order, cve_id, "inf" if math.isinf(value) else repr(value)])
