"""Pipeline orchestration and experiments.

``run_pipeline`` chains the four stages (predict, cluster, assess, advise).
``simulate_timeline`` replays a feed month by month, ``bench_predictor``
measures the score predictor and ``compare_clusterings`` reruns the pipeline
across clustering algorithms and featurizations.
"""

from __future__ import annotations

import calendar
import json
import logging
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from risk_manager.core.cluster import ClusterAssignment, ClusterParams, run_clustering, shared_groups
from risk_manager.core.configurator import Policy, RankedConfiguration, RiskIndex, advise
from risk_manager.core.corpus import (
    CorpusSnapshot,
    CveRecord,
    EpssEntry,
    NodeIdentity,
    build_snapshot,
    load_catalog,
    parse_cve_feed,
    parse_epss_csv,
    parse_exploit_index,
    record_as_of,
)
from risk_manager.core.errors import ParameterError
from risk_manager.core.predictor import (
    FEATURIZATIONS,
    ForestModel,
    ForestParams,
    PredictedScore,
    ScoreBinning,
    bin_score,
    evaluate_matrix,
    fit_forest,
    predict_many,
)
from risk_manager.core.scoring import OLDNESS_THRESHOLD_DAYS, AssessedScore, Provenance, assess_all
from risk_manager.core.textfeat import FeatureVector, build_vocabulary, stack, tfidf_matrix
from risk_manager.shared.config import check_keys

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
REPORT_FIELDS = ["month", "security", "resilience", "shared_epss_risk", "injected", "predicted", "clusters"]
# row field -> column name in CSV and JSON reports
REPORT_RENAMES = {"shared_epss_risk": "fig4_metric"}
REPORT_COLUMNS = [REPORT_RENAMES.get(name, name) for name in REPORT_FIELDS]
COMPARE_COLUMNS = ["algorithm", "featurization", "groups", "security", "resilience", "risk"]
BENCH_COLUMNS = ["accuracy", "rmse", "train_time", "infer_time", "n_train", "n_test", "majority_frequency"]
CLUSTER_FEATURIZATIONS = ("auto", *FEATURIZATIONS)


@dataclass(frozen=True)
class PipelineParams:
    featurization: str = "auto"
    predictor_featurization: str = "bow"
    algorithm: str = "optics"
    eps: float = 0.5
    min_samples: int = 5
    xi: float = 0.05
    k: int = 8
    min_df: int = 2
    stem: bool = False
    bin_width: float = 1.0
    forest: ForestParams = field(default_factory=ForestParams)
    seed: int = 2023
    nodes: int = 4
    policy: Policy = field(default_factory=Policy)
    score_field: str = "hal"
    oldness_threshold: int = OLDNESS_THRESHOLD_DAYS

    def __post_init__(self):
        if self.featurization not in CLUSTER_FEATURIZATIONS:
            raise ParameterError(f"featurization must be one of {CLUSTER_FEATURIZATIONS}, got {self.featurization!r}")
        if self.predictor_featurization not in FEATURIZATIONS:
            raise ParameterError(
                f"predictor_featurization must be one of {FEATURIZATIONS}, got {self.predictor_featurization!r}"
            )
        if self.nodes < 1:
            raise ParameterError(f"nodes must be >= 1, got {self.nodes}")
        if self.min_df < 1:
            raise ParameterError(f"min_df must be >= 1, got {self.min_df}")

    def clustering_featurization(self, embeddings: Mapping[str, FeatureVector] | None) -> str:
        """``auto`` clusters embeddings when they are loaded and TF-IDF otherwise."""
        if self.featurization == "auto":
            return "emb" if embeddings is not None else "bow"
        return self.featurization

    @property
    def cluster_params(self) -> ClusterParams:
        return ClusterParams(self.algorithm, self.eps, self.min_samples, self.xi, self.k, self.seed)

    @classmethod
    def from_manifest(cls, sections: Mapping[str, Mapping], **overrides) -> PipelineParams:
        """Defaults, then manifest values, then explicit overrides."""
        pipeline = dict(sections.get("pipeline", {}))
        forest = dict(sections.get("forest", {}))
        check_keys("pipeline", pipeline, {f.name for f in fields(cls) if f.name != "forest"} | {"alpha"})
        check_keys("forest", forest, {f.name for f in fields(ForestParams)})

        if "policy" in pipeline or "alpha" in pipeline:
            pipeline["policy"] = Policy.parse(pipeline.pop("policy", "resilience_first"), pipeline.pop("alpha", None))
        forest.update(overrides.pop("forest", {}))
        pipeline.update({k: v for k, v in overrides.items() if v is not None})
        return cls(forest=ForestParams(**forest), **pipeline)


@dataclass(frozen=True)
class PipelineResult:
    snapshot: CorpusSnapshot
    model: ForestModel | None
    predictions: dict[str, PredictedScore]
    clusters: ClusterAssignment
    assessed: dict[str, AssessedScore]
    ranking: list[RankedConfiguration]

    @property
    def head(self) -> RankedConfiguration:
        return self.ranking[0]


@dataclass(frozen=True)
class Feed:
    records: list[CveRecord]
    epss: list[EpssEntry]
    exploited_ids: frozenset[str]
    catalog: frozenset[NodeIdentity]

    def snapshot(self, as_of: date) -> CorpusSnapshot:
        """Snapshot as of ``as_of``; records analyzed later are still Received."""
        visible = [record_as_of(r, as_of) for r in self.records if r.published_date <= as_of]
        return build_snapshot(visible, self.epss, self.exploited_ids, self.catalog, as_of)


def load_feed(
    cve_path: str | Path,
    catalog_path: str | Path | None = None,
    epss_path: str | Path | None = None,
    exploits_path: str | Path | None = None,
    epss_date: date | None = None,
) -> Feed:
    with open(cve_path, "rb") as f:
        records = parse_cve_feed(f)
    catalog: frozenset[NodeIdentity] = frozenset()
    if catalog_path is not None:
        with open(catalog_path) as f:
            catalog = load_catalog(f)
    epss: list[EpssEntry] = []
    if epss_path is not None:
        with open(epss_path, "rb") as f:
            epss = parse_epss_csv(f, epss_date)
    exploited: frozenset[str] = frozenset()
    if exploits_path is not None:
        with open(exploits_path, "rb") as f:
            exploited = parse_exploit_index(f)
    return Feed(records, epss, exploited, catalog)


@dataclass(frozen=True)
class MonthlyReportRow:
    month: str
    nodes: tuple[str, ...]
    security: float
    resilience: float
    shared_epss_risk: float
    injected: int
    predicted: int
    clusters: int
    reassessed: int = 0


@dataclass(frozen=True)
class BenchRow:
    accuracy: float
    rmse: float
    train_time: float
    infer_time: float
    n_train: int
    n_test: int
    majority_frequency: float


@dataclass(frozen=True)
class CompareRow:
    algorithm: str
    featurization: str
    groups: int
    security: float
    resilience: float
    risk: float


def _embedding_matrix(ids: Sequence[str], embeddings: Mapping[str, FeatureVector] | None) -> np.ndarray:
    if embeddings is None:
        raise ParameterError("embedding featurization requested but no embeddings were loaded")
    missing = [cid for cid in ids if cid not in embeddings]
    if missing:
        raise ParameterError(f"{len(missing)} CVE(s) have no embedding, first: {missing[0]}")
    return stack([embeddings[cid] for cid in ids])


def train_predictor(
    snapshot: CorpusSnapshot,
    params: PipelineParams,
    embeddings: Mapping[str, FeatureVector] | None = None,
) -> ForestModel:
    """Fit the score predictor on every Analyzed CVE in the snapshot."""
    ids = snapshot.analyzed_ids()
    if not ids:
        raise ParameterError("snapshot has no Analyzed CVEs to train the predictor on")
    binning = ScoreBinning(params.bin_width)
    labels = [bin_score(snapshot.records[cid].cvss_base, binning) for cid in ids]

    vocabulary = None
    if params.predictor_featurization == "bow":
        vocabulary = build_vocabulary([snapshot.records[c].description for c in ids], params.min_df, params.stem)
        matrix = tfidf_matrix([snapshot.records[c].description for c in ids], vocabulary)
    else:
        matrix = _embedding_matrix(ids, embeddings)
    return fit_forest(
        matrix, labels, params.forest, params.seed,
        binning=binning,
        featurization=params.predictor_featurization,
        vocabulary=vocabulary,
    )


def predict_received(
    snapshot: CorpusSnapshot,
    model: ForestModel,
    embeddings: Mapping[str, FeatureVector] | None = None,
) -> dict[str, PredictedScore]:
    ids = snapshot.received_ids()
    if not ids:
        return {}
    if model.featurization == "bow":
        matrix = tfidf_matrix([snapshot.records[c].description for c in ids], model.vocabulary)
    else:
        matrix = _embedding_matrix(ids, embeddings)
    return predict_many(model, matrix, ids)


def cluster_points(
    snapshot: CorpusSnapshot,
    params: PipelineParams,
    embeddings: Mapping[str, FeatureVector] | None = None,
) -> list[tuple[str, FeatureVector]]:
    ids = list(snapshot.records)
    if params.clustering_featurization(embeddings) == "emb":
        matrix = _embedding_matrix(ids, embeddings)
        return [(cid, FeatureVector(row)) for cid, row in zip(ids, matrix)]
    descriptions = [snapshot.records[c].description for c in ids]
    vocabulary = build_vocabulary(descriptions, params.min_df, params.stem)
    dense = tfidf_matrix(descriptions, vocabulary).toarray()
    return [(cid, FeatureVector(row)) for cid, row in zip(ids, dense)]


def run_pipeline(
    snapshot: CorpusSnapshot,
    params: PipelineParams,
    embeddings: Mapping[str, FeatureVector] | None = None,
    model: ForestModel | None = None,
) -> PipelineResult:
    """Predict, cluster, assess and advise, returning every intermediate."""
    if not snapshot.records:
        raise ParameterError(f"snapshot as of {snapshot.as_of} holds no CVEs")

    received = snapshot.received_ids()
    logger.info("Stage predict: %d received CVEs", len(received))
    predictions: dict[str, PredictedScore] = {}
    if received:
        if model is None:
            model = train_predictor(snapshot, params, embeddings)
        predictions = predict_received(snapshot, model, embeddings)

    logger.info("Stage cluster: %d descriptions", len(snapshot.records))
    clusters = run_clustering(cluster_points(snapshot, params, embeddings), params.cluster_params)

    logger.info("Stage assess")
    assessed = assess_all(snapshot, predictions, params.oldness_threshold)

    logger.info("Stage advise: n=%d over %d nodes", params.nodes, len(snapshot.catalog))
    ranking = advise(
        snapshot.catalog, params.nodes, params.policy, assessed, snapshot, clusters, params.score_field,
    )
    return PipelineResult(snapshot, model, predictions, clusters, assessed, ranking)


def month_ends(cutoff: date, months: int) -> list[date]:
    """Last day of each of the ``months`` calendar months after ``cutoff``."""
    if months < 1:
        raise ParameterError(f"months must be >= 1, got {months}")
    ends = []
    year, month = cutoff.year, cutoff.month
    for _ in range(months):
        year, month = (year + 1, 1) if month == 12 else (year, month + 1)
        ends.append(date(year, month, calendar.monthrange(year, month)[1]))
    return ends


def advised_metric(result: PipelineResult, score_field: str) -> float:
    """Resilience of the advised configuration re-scored with ``score_field``."""
    index = RiskIndex(result.assessed, result.snapshot, result.clusters, score_field,
                      nodes=result.head.report.configuration.nodes)
    return index.resilience(result.head.report.configuration)


def simulate_timeline(
    feed: Feed,
    cutoff: date,
    months: int,
    params: PipelineParams,
    embeddings: Mapping[str, FeatureVector] | None = None,
) -> list[MonthlyReportRow]:
    """One report row per month; the predictor is retrained every month."""
    rows = []
    previous_end = cutoff
    previously_predicted = set(feed.snapshot(cutoff).received_ids())
    for as_of in month_ends(cutoff, months):
        snapshot = feed.snapshot(as_of)
        injected = sum(1 for r in feed.records if previous_end < r.published_date <= as_of)
        result = run_pipeline(snapshot, params, embeddings)

        official_now = {
            cid for cid, score in result.assessed.items() if score.base_provenance is Provenance.OFFICIAL
        }
        reassessed = len(previously_predicted & official_now)
        previously_predicted = set(result.predictions)

        head = result.head
        row = MonthlyReportRow(
            month=f"{as_of.year:04d}-{as_of.month:02d}",
            nodes=head.names,
            security=head.security,
            resilience=head.resilience,
            shared_epss_risk=advised_metric(result, "lazarus_epss"),
            injected=injected,
            predicted=len(result.predictions),
            clusters=result.clusters.cluster_count,
            reassessed=reassessed,
        )
        logger.info("Month %s: injected=%d predicted=%d reassessed=%d advised=%s",
                    row.month, injected, row.predicted, reassessed, ",".join(row.nodes))
        rows.append(row)
        previous_end = as_of
    return rows


def bench_predictor(
    records: Sequence[CveRecord],
    hidden_scores: Mapping[str, float],
    params: PipelineParams,
    split_fraction: float = 0.2,
    seed: int | None = None,
    shuffle_labels: bool = False,
    embeddings: Mapping[str, FeatureVector] | None = None,
) -> BenchRow:
    """Hold out ``split_fraction`` of all scored CVEs and report predictor metrics."""
    if not 0.0 < split_fraction < 1.0:
        raise ParameterError(f"split_fraction must be in (0, 1), got {split_fraction}")
    seed = params.seed if seed is None else seed
    binning = ScoreBinning(params.bin_width)

    scored = sorted(
        (r.id, r.description, r.cvss_base if r.analyzed else hidden_scores.get(r.id))
        for r in records
    )
    scored = [item for item in scored if item[2] is not None]
    if len(scored) < 2:
        raise ParameterError("need at least two scored CVEs to benchmark")
    ids = [item[0] for item in scored]
    descriptions = [item[1] for item in scored]
    scores = np.array([item[2] for item in scored], dtype=float)
    if shuffle_labels:
        scores = np.random.default_rng(seed).permutation(scores)
    labels = np.array([bin_score(s, binning) for s in scores])

    positions = np.arange(len(ids))
    counts = Counter(labels.tolist())
    stratify = labels if min(counts.values()) >= 2 else None
    if stratify is None:
        logger.warning("A score bin has fewer than 2 members; falling back to an unstratified split")
    try:
        train_idx, test_idx = train_test_split(
            positions, test_size=split_fraction, random_state=seed, shuffle=True, stratify=stratify,
        )
    except ValueError:
        if stratify is None:
            raise
        logger.warning("Stratified split not possible at this size; falling back to an unstratified split")
        train_idx, test_idx = train_test_split(positions, test_size=split_fraction, random_state=seed, shuffle=True)
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)

    vocabulary = None
    if params.predictor_featurization == "bow":
        vocabulary = build_vocabulary([descriptions[i] for i in train_idx], params.min_df, params.stem)
        train_matrix = tfidf_matrix([descriptions[i] for i in train_idx], vocabulary)
        test_matrix = tfidf_matrix([descriptions[i] for i in test_idx], vocabulary)
    else:
        train_matrix = _embedding_matrix([ids[i] for i in train_idx], embeddings)
        test_matrix = _embedding_matrix([ids[i] for i in test_idx], embeddings)

    model = fit_forest(
        train_matrix, labels[train_idx], params.forest, seed,
        binning=binning, featurization=params.predictor_featurization, vocabulary=vocabulary,
    )
    metrics = evaluate_matrix(model, test_matrix, scores[test_idx])

    majority_label = Counter(labels[train_idx].tolist()).most_common(1)[0][0]
    majority_frequency = float(np.mean(labels[test_idx] == majority_label))
    logger.info("Benchmark: accuracy=%.4f rmse=%.4f (majority %.4f)",
                metrics.accuracy, metrics.rmse, majority_frequency)
    return BenchRow(
        accuracy=metrics.accuracy,
        rmse=metrics.rmse,
        train_time=metrics.train_time,
        infer_time=metrics.infer_time,
        n_train=int(train_idx.size),
        n_test=int(test_idx.size),
        majority_frequency=majority_frequency,
    )


def compare_clusterings(
    snapshot: CorpusSnapshot,
    algorithms: Iterable[str],
    featurizations: Iterable[str],
    params: PipelineParams,
    embeddings: Mapping[str, FeatureVector] | None = None,
) -> list[CompareRow]:
    """Rerun the pipeline for every (algorithm, featurization) cell."""
    algorithms, featurizations = list(algorithms), list(featurizations)
    for algorithm in algorithms:
        ClusterParams(algorithm=algorithm)
    for featurization in featurizations:
        if featurization not in FEATURIZATIONS:
            raise ParameterError(f"unknown featurization {featurization!r}")
    if "emb" in featurizations and embeddings is None:
        raise ParameterError("emb featurization requested but no embeddings were loaded")

    # one predictor for every cell so only the clustering varies
    model = train_predictor(snapshot, params, embeddings) if snapshot.received_ids() else None

    rows = []
    for algorithm in algorithms:
        for featurization in featurizations:
            cell = replace(params, algorithm=algorithm, featurization=featurization)
            result = run_pipeline(snapshot, cell, embeddings, model)
            rows.append(CompareRow(
                algorithm=algorithm,
                featurization=featurization,
                groups=len(shared_groups(result.clusters)),
                security=result.head.security,
                resilience=result.head.resilience,
                risk=advised_metric(result, "lazarus"),
            ))
    return rows


def _frame(rows: Sequence, columns: list[str]) -> pd.DataFrame:
    return pd.DataFrame([{c: getattr(row, c) for c in columns} for row in rows], columns=columns)


def render_report(rows: Sequence[MonthlyReportRow], fmt: str) -> str:
    months = [row.month for row in rows]
    if months != sorted(set(months)):
        raise ValueError("report months must be strictly increasing")
    if fmt == "csv":
        return _frame(rows, REPORT_FIELDS).rename(columns=REPORT_RENAMES).to_csv(index=False, lineterminator="\n")
    if fmt == "json":
        payload = {"version": REPORT_VERSION, "rows": [
            {REPORT_RENAMES.get(k, k): v for k, v in asdict(row).items()} | {"nodes": list(row.nodes)} for row in rows
        ]}
        return json.dumps(payload, indent=2) + "\n"
    raise ParameterError(f"unknown report format {fmt!r}")


def emit_report(rows: Sequence[MonthlyReportRow], fmt: str, path: str | Path) -> None:
    """Write the monthly report as CSV or versioned JSON."""
    Path(path).write_text(render_report(rows, fmt))


def load_report_json(path: str | Path) -> list[MonthlyReportRow]:
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload, dict) or payload.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not a version {REPORT_VERSION} report")
    columns = {column: name for name, column in REPORT_RENAMES.items()}
    return [
        MonthlyReportRow(**{columns.get(k, k): v for k, v in item.items()} | {"nodes": tuple(item["nodes"])})
        for item in payload["rows"]
    ]


def emit_table(rows: Sequence, columns: list[str], path: str | Path | None, fmt: str = "csv"):
    """Write compare/bench rows as CSV or JSON; returns the text when ``path`` is None."""
    frame = _frame(rows, columns)
    if fmt == "csv":
        text = frame.to_csv(index=False, lineterminator="\n")
    elif fmt == "json":
        text = json.dumps({"version": REPORT_VERSION, "rows": frame.to_dict(orient="records")}, indent=2) + "\n"
    else:
        raise ParameterError(f"unknown report format {fmt!r}")
    if path is None:
        return text
    Path(path).write_text(text)
    return None
