"""Unit tests for the random-forest score predictor."""

from __future__ import annotations

import joblib
import numpy as np
import pytest

from risk_manager.core.errors import FeedFormatError, ParameterError
from risk_manager.core.predictor import (
    ForestParams,
    ScoreBinning,
    bin_score,
    evaluate,
    fit_forest,
    load_model,
    majority_vote,
    predict_many,
    predict_score,
    save_model,
    train_forest,
)
from risk_manager.core.textfeat import FeatureVector

PARAMS = ForestParams(trees=15)


def _one_hot(index: int, dimension: int = 4) -> FeatureVector:
    values = np.zeros(dimension)
    values[index] = 1.0
    return FeatureVector(values)


def _examples(per_class: int = 6) -> list[tuple[FeatureVector, int]]:
    # class c lives on axis c and means a score in [2c, 2c + 1)
    return [(_one_hot(c), 2 * c) for c in range(4) for _ in range(per_class)]


@pytest.mark.parametrize("score,label", [(0.0, 0), (0.99, 0), (3.999, 3), (4.0, 4), (9.99, 9), (10.0, 9)])
def test_bin_score_unit_width(score, label):
    assert bin_score(score, ScoreBinning()) == label


def test_score_binning_shape():
    unit = ScoreBinning()
    half = ScoreBinning(0.5)

    assert unit.count == 10
    assert half.count == 20
    assert unit.representative(7) == 7.5
    assert unit.describe(0) == "[0,1)"
    assert unit.describe(9) == "[9,10]"
    assert bin_score(10.0, half) == 19
    with pytest.raises(ValueError):
        bin_score(10.5, unit)
    with pytest.raises(ParameterError):
        ScoreBinning(0.0)


def test_majority_vote_breaks_ties_toward_lowest_label():
    votes = np.array([[0, 3, 2], [1, 3, 1], [1, 2, 2], [0, 2, 1]])

    winners, share = majority_vote(votes, 4)

    assert winners.tolist() == [0, 2, 1]
    assert share.tolist() == [0.5, 0.5, 0.5]


def test_train_and_predict_learns_separable_classes():
    model = train_forest(_examples(), PARAMS, seed=5)

    for c in range(4):
        prediction = predict_score(model, _one_hot(c), f"CVE-2023-000{c}")
        assert prediction.label == 2 * c
        assert prediction.score == 2 * c + 0.5
        assert prediction.vote_fraction > 0.5


def test_training_is_deterministic_per_seed():
    first = train_forest(_examples(), PARAMS, seed=5)
    again = train_forest(_examples(), PARAMS, seed=5)
    matrix = np.eye(4)[[0, 1, 2, 3, 1]] * 0.7
    ids = [f"CVE-2023-{n:04d}" for n in range(5)]

    assert predict_many(first, matrix, ids) == predict_many(again, matrix, ids)


def test_evaluate_perfect_predictions_bounds_rmse():
    model = train_forest(_examples(), PARAMS, seed=5)
    test = [(_one_hot(c), 2 * c + 0.9) for c in range(4)]

    metrics = evaluate(model, test)

    assert metrics.accuracy == 1.0
    assert metrics.rmse == pytest.approx(0.4)
    assert metrics.train_time == model.train_time


def test_predict_rejects_dimension_mismatch():
    model = train_forest(_examples(), PARAMS, seed=5)

    with pytest.raises(ValueError, match="dimension"):
        predict_score(model, FeatureVector(np.ones(3)))


@pytest.mark.parametrize("matrix,labels,error", [
    (np.zeros((0, 2)), [], ParameterError),
    (np.eye(2), [0, 12], ValueError),
    (np.eye(2), [0], ValueError),
])
def test_fit_forest_validates_labels(matrix, labels, error):
    with pytest.raises(error):
        fit_forest(matrix, labels, PARAMS, 1, binning=ScoreBinning())


def test_save_and_load_model_round_trip(tmp_path):
    model = train_forest(_examples(), PARAMS, seed=5)
    path = tmp_path / "model.joblib"

    save_model(model, path)
    loaded = load_model(path)

    matrix = np.eye(4)
    ids = ["CVE-2023-0001", "CVE-2023-0002", "CVE-2023-0003", "CVE-2023-0004"]
    assert predict_many(loaded, matrix, ids) == predict_many(model, matrix, ids)
    assert loaded.params == model.params
    assert loaded.featurization == "bow"
    assert loaded.seed == 5


@pytest.mark.parametrize("payload", [
    {"format": "something-else", "version": 1},
    {"format": "risk-manager-forest", "version": 99},
    ["not", "a", "dict"],
])
def test_load_model_rejects_foreign_files(tmp_path, payload):
    path = tmp_path / "model.joblib"
    joblib.dump(payload, path)

    with pytest.raises(FeedFormatError):
        load_model(path)
