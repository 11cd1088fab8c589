"""Provisional CVSS base scores for Received CVEs.

A random forest classifies description vectors into score intervals; the
predicted score is the midpoint of the winning interval.
"""

from __future__ import annotations

import logging
import math
import pickle
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import joblib
import numpy as np
from scipy import sparse
from sklearn.ensemble import RandomForestClassifier

from risk_manager.core.errors import FeedFormatError, ParameterError
from risk_manager.core.textfeat import FeatureVector, Vocabulary, stack

logger = logging.getLogger(__name__)

MODEL_FORMAT = "risk-manager-forest"
MODEL_VERSION = 1
FEATURIZATIONS = ("bow", "emb")


@dataclass(frozen=True)
class ScoreBinning:
    bin_width: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.bin_width <= 10.0:
            raise ParameterError(f"bin_width must be in (0, 10], got {self.bin_width}")

    @property
    def count(self) -> int:
        return max(1, math.ceil(10.0 / self.bin_width - 1e-9))

    @property
    def edges(self) -> tuple[float, ...]:
        return tuple(min(k * self.bin_width, 10.0) for k in range(self.count)) + (10.0,)

    def bounds(self, label: int) -> tuple[float, float]:
        if not 0 <= label < self.count:
            raise ValueError(f"bin label {label} outside 0..{self.count - 1}")
        edges = self.edges
        return edges[label], edges[label + 1]

    def representative(self, label: int) -> float:
        low, high = self.bounds(label)
        return (low + high) / 2.0

    def describe(self, label: int) -> str:
        low, high = self.bounds(label)
        closing = "]" if label == self.count - 1 else ")"
        return f"[{low:g},{high:g}{closing}"


def bin_score(score: float, binning: ScoreBinning) -> int:
    """Interval label: ``[k*w, (k+1)*w)``, the last interval closed at 10.0."""
    if not 0.0 <= score <= 10.0:
        raise ValueError(f"score {score} outside [0, 10]")
    return min(int(score // binning.bin_width), binning.count - 1)


@dataclass(frozen=True)
class ForestParams:
    trees: int = 100
    max_depth: int = 32
    min_leaf: int = 2
    features_per_split: str = "sqrt"
    bootstrap: bool = True
    n_jobs: int | None = None

    def __post_init__(self):
        if self.trees < 1:
            raise ParameterError(f"trees must be >= 1, got {self.trees}")
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ParameterError("max_depth and min_leaf must be >= 1")


@dataclass(frozen=True)
class ForestModel:
    forest: RandomForestClassifier
    binning: ScoreBinning
    params: ForestParams
    featurization: str
    vocabulary: Vocabulary | None
    seed: int
    train_time: float

    @property
    def dimension(self) -> int:
        return int(self.forest.n_features_in_)


@dataclass(frozen=True)
class PredictedScore:
    cve_id: str
    label: int
    score: float
    vote_fraction: float


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    rmse: float
    train_time: float
    infer_time: float


def fit_forest(
    matrix,
    labels: Sequence[int],
    params: ForestParams,
    seed: int,
    *,
    binning: ScoreBinning,
    featurization: str = "bow",
    vocabulary: Vocabulary | None = None,
) -> ForestModel:
    """Train on a (sparse or dense) matrix whose rows line up with ``labels``."""
    if featurization not in FEATURIZATIONS:
        raise ParameterError(f"unknown featurization {featurization!r}")
    y = np.asarray(labels, dtype=int)
    if matrix.shape[0] == 0 or y.size == 0:
        raise ParameterError("cannot train on an empty training set")
    if matrix.shape[0] != y.size:
        raise ValueError(f"{matrix.shape[0]} rows but {y.size} labels")
    if y.min() < 0 or y.max() >= binning.count:
        raise ValueError(f"labels must lie in 0..{binning.count - 1}")

    forest = RandomForestClassifier(
        n_estimators=params.trees,
        criterion="gini",
        max_depth=params.max_depth,
        min_samples_leaf=params.min_leaf,
        max_features=params.features_per_split,
        bootstrap=params.bootstrap,
        n_jobs=params.n_jobs,
        random_state=seed,
    )
    started = time.perf_counter()
    forest.fit(matrix, y)
    elapsed = time.perf_counter() - started
    logger.info("Trained %d trees on %d examples (%d classes) in %.2fs",
                params.trees, y.size, len(forest.classes_), elapsed)
    return ForestModel(forest, binning, params, featurization, vocabulary, seed, elapsed)


def train_forest(
    examples: Sequence[tuple[FeatureVector, int]],
    params: ForestParams,
    seed: int,
    *,
    binning: ScoreBinning | None = None,
    featurization: str = "bow",
    vocabulary: Vocabulary | None = None,
) -> ForestModel:
    if not examples:
        raise ParameterError("cannot train on an empty training set")
    matrix = stack([vector for vector, _ in examples])
    labels = [label for _, label in examples]
    return fit_forest(
        matrix, labels, params, seed,
        binning=binning or ScoreBinning(),
        featurization=featurization,
        vocabulary=vocabulary,
    )


def majority_vote(votes: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Winning class per column of a (trees, rows) vote array and its share.

    Ties go to the lowest class index.
    """
    votes = np.asarray(votes, dtype=np.int64)
    n_trees, n_rows = votes.shape
    counts = np.zeros((n_rows, n_classes), dtype=np.int64)
    rows = np.arange(n_rows)
    for tree_votes in votes:
        counts[rows, tree_votes] += 1
    winners = counts.argmax(axis=1)
    return winners, counts[rows, winners] / n_trees


def _votes(model: ForestModel, matrix) -> tuple[np.ndarray, np.ndarray]:
    if matrix.shape[1] != model.dimension:
        raise ValueError(f"vector dimension {matrix.shape[1]} does not match model dimension {model.dimension}")
    forest = model.forest
    features = matrix.astype(np.float32) if sparse.issparse(matrix) else np.asarray(matrix, dtype=np.float32)
    votes = np.stack([tree.predict(features) for tree in forest.estimators_]).astype(np.int64)
    winners, share = majority_vote(votes, len(forest.classes_))
    return forest.classes_[winners].astype(int), share


def predict_many(model: ForestModel, matrix, ids: Sequence[str]) -> dict[str, PredictedScore]:
    if matrix.shape[0] != len(ids):
        raise ValueError(f"{matrix.shape[0]} rows but {len(ids)} ids")
    if not ids:
        return {}
    labels, shares = _votes(model, matrix)
    return {
        cve_id: PredictedScore(cve_id, int(label), model.binning.representative(int(label)), float(share))
        for cve_id, label, share in zip(ids, labels, shares)
    }


def predict_score(model: ForestModel, vector: FeatureVector, cve_id: str = "") -> PredictedScore:
    return predict_many(model, vector.values.reshape(1, -1), [cve_id])[cve_id]


def evaluate_matrix(model: ForestModel, matrix, true_scores: Sequence[float]) -> Metrics:
    truth = np.asarray(true_scores, dtype=float)
    if truth.size == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    started = time.perf_counter()
    labels, _ = _votes(model, matrix)
    infer_time = time.perf_counter() - started

    expected = np.array([bin_score(s, model.binning) for s in truth])
    predicted = np.array([model.binning.representative(int(label)) for label in labels])
    return Metrics(
        accuracy=float(np.mean(labels == expected)),
        rmse=float(np.sqrt(np.mean((predicted - truth) ** 2))),
        train_time=model.train_time,
        infer_time=infer_time,
    )


def evaluate(model: ForestModel, test: Sequence[tuple[FeatureVector, float]]) -> Metrics:
    if not test:
        raise ParameterError("cannot evaluate on an empty test set")
    return evaluate_matrix(model, stack([v for v, _ in test]), [s for _, s in test])


def save_model(model: ForestModel, path: str | Path) -> None:
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "forest": model.forest,
        "bin_width": model.binning.bin_width,
        "params": asdict(model.params),
        "featurization": model.featurization,
        "vocabulary": model.vocabulary,
        "seed": model.seed,
        "train_time": model.train_time,
    }
    joblib.dump(payload, Path(path))
    logger.info("Model saved to %s", path)


def load_model(path: str | Path) -> ForestModel:
    try:
        payload = joblib.load(Path(path))
    except (pickle.UnpicklingError, EOFError, KeyError, IndexError) as exc:
        raise FeedFormatError(f"{path}: not a model file ({exc})") from exc

    if not isinstance(payload, Mapping) or payload.get("format") != MODEL_FORMAT:
        raise FeedFormatError(f"{path}: not a {MODEL_FORMAT} file")
    if payload.get("version") != MODEL_VERSION:
        raise FeedFormatError(f"{path}: unsupported model version {payload.get('version')!r}")

    return ForestModel(
        forest=payload["forest"],
        binning=ScoreBinning(payload["bin_width"]),
        params=ForestParams(**payload["params"]),
        featurization=payload["featurization"],
        vocabulary=payload["vocabulary"],
        seed=payload["seed"],
        train_time=payload["train_time"],
    )
