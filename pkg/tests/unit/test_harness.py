"""Unit tests for the pipeline runner and the experiments built on it."""

from __future__ import annotations

import json
from dataclasses import replace
from datetime import date

import pytest

from risk_manager.core.configurator import Policy
from risk_manager.core.errors import ParameterError
from risk_manager.core.harness import (
    BENCH_COLUMNS,
    COMPARE_COLUMNS,
    REPORT_COLUMNS,
    MonthlyReportRow,
    PipelineParams,
    bench_predictor,
    compare_clusterings,
    emit_report,
    emit_table,
    load_report_json,
    month_ends,
    render_report,
    run_pipeline,
    simulate_timeline,
)
from risk_manager.core.predictor import ForestParams
from risk_manager.core.synthetic import GeneratorSpec, generate_synthetic_dataset
from risk_manager.core.textfeat import load_embeddings


@pytest.fixture
def embeddings(fixtures):
    with open(fixtures / "embeddings.csv", "rb") as f:
        return load_embeddings(f)


def _row(month: str, **overrides) -> MonthlyReportRow:
    fields = dict(month=month, nodes=("a", "b"), security=3.5, resilience=1.25, shared_epss_risk=0.5,
                  injected=2, predicted=1, clusters=0, reassessed=1)
    fields.update(overrides)
    return MonthlyReportRow(**fields)


def test_run_pipeline_on_fixture(snapshot, fast_params):
    result = run_pipeline(snapshot, fast_params)

    assert set(result.predictions) == {"CVE-2023-1003", "CVE-2023-2001", "CVE-2023-2005"}
    assert set(result.assessed) == set(snapshot.records)
    assert len(result.ranking) == 35
    assert len(result.head.names) == 4
    assert result.model is not None


def test_run_pipeline_is_deterministic(snapshot, fast_params):
    first = run_pipeline(snapshot, fast_params)
    again = run_pipeline(snapshot, fast_params)

    assert [(r.names, r.security, r.resilience) for r in first.ranking] == \
        [(r.names, r.security, r.resilience) for r in again.ranking]
    assert first.predictions == again.predictions


def test_run_pipeline_with_embeddings_groups_triple(snapshot, fast_params, embeddings):
    params = replace(fast_params, featurization="emb", predictor_featurization="emb")

    result = run_pipeline(snapshot, params, embeddings)

    triple = {result.clusters.labels[c] for c in ("CVE-2023-1001", "CVE-2023-1002", "CVE-2023-1003")}
    assert len(triple) == 1 and -1 not in triple


def test_clustering_uses_embeddings_whenever_they_are_loaded(snapshot, fast_params, embeddings):
    assert fast_params.featurization == "auto"
    assert fast_params.clustering_featurization(None) == "bow"
    assert fast_params.clustering_featurization(embeddings) == "emb"

    result = run_pipeline(snapshot, fast_params, embeddings)

    triple = {result.clusters.labels[c] for c in ("CVE-2023-1001", "CVE-2023-1002", "CVE-2023-1003")}
    assert len(triple) == 1 and -1 not in triple


def test_emb_featurization_needs_embeddings(snapshot, fast_params):
    with pytest.raises(ParameterError, match="embeddings"):
        run_pipeline(snapshot, replace(fast_params, featurization="emb"))


def test_month_ends_handle_year_and_leap_boundaries():
    assert month_ends(date(2023, 11, 15), 4) == [
        date(2023, 12, 31), date(2024, 1, 31), date(2024, 2, 29), date(2024, 3, 31),
    ]
    with pytest.raises(ParameterError):
        month_ends(date(2023, 1, 1), 0)


def test_timeline_tracks_injection_and_reassessment(feed, as_of, fast_params):
    rows = simulate_timeline(feed, as_of, 2, fast_params)

    assert [row.month for row in rows] == ["2023-07", "2023-08"]
    july, august = rows
    assert (july.injected, july.predicted, july.reassessed) == (0, 2, 1)
    assert (august.injected, august.predicted) == (1, 3)
    assert all(len(row.nodes) == 4 for row in rows)
    assert all(row.shared_epss_risk >= 0.0 for row in rows)


def test_render_report_csv_columns():
    text = render_report([_row("2023-07"), _row("2023-08")], "csv")

    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[0] == "month,security,resilience,fig4_metric,injected,predicted,clusters"
    assert lines[1] == "2023-07,3.5,1.25,0.5,2,1,0"


def test_emit_report_json_reads_back(tmp_path):
    rows = [_row("2023-07"), _row("2023-08", nodes=("c", "d"))]
    path = tmp_path / "report.json"

    emit_report(rows, "json", path)

    payload = json.loads(path.read_text())
    assert payload["version"] == 1
    assert payload["rows"][0]["fig4_metric"] == 0.5
    assert "shared_epss_risk" not in payload["rows"][0]
    assert load_report_json(path) == rows


@pytest.mark.parametrize("months", [["2023-08", "2023-07"], ["2023-07", "2023-07"]])
def test_render_report_requires_increasing_months(months):
    with pytest.raises(ValueError, match="strictly increasing"):
        render_report([_row(m) for m in months], "csv")


def test_render_report_rejects_unknown_format():
    with pytest.raises(ParameterError):
        render_report([_row("2023-07")], "xml")


def test_load_report_json_rejects_other_versions(tmp_path):
    path = tmp_path / "report.json"
    path.write_text(json.dumps({"version": 2, "rows": []}))

    with pytest.raises(ValueError, match="version 1"):
        load_report_json(path)


def test_compare_covers_every_cell(snapshot, fast_params, embeddings):
    params = replace(fast_params, k=1)

    rows = compare_clusterings(snapshot, ["dbscan", "kmeans"], ["bow", "emb"], params, embeddings)

    assert [(r.algorithm, r.featurization) for r in rows] == [
        ("dbscan", "bow"), ("dbscan", "emb"), ("kmeans", "bow"), ("kmeans", "emb"),
    ]
    by_cell = {(r.algorithm, r.featurization): r for r in rows}
    for featurization in ("bow", "emb"):
        lumped = by_cell[("kmeans", featurization)]
        assert lumped.groups == 1
        # one cluster shares everything, so no configuration can do better
        assert lumped.resilience >= by_cell[("dbscan", featurization)].resilience
    text = emit_table(rows, COMPARE_COLUMNS, None)
    assert text.splitlines()[0] == ",".join(COMPARE_COLUMNS)
    assert len(text.splitlines()) == 5


@pytest.mark.parametrize("algorithms,featurizations", [(["hdbscan"], ["bow"]), (["optics"], ["lda"]), (["optics"], ["emb"])])
def test_compare_rejects_bad_cells(snapshot, fast_params, algorithms, featurizations):
    with pytest.raises(ParameterError):
        compare_clusterings(snapshot, algorithms, featurizations, fast_params)


@pytest.fixture(scope="module")
def bench_dataset():
    return generate_synthetic_dataset(GeneratorSpec(total=5000), seed=2023)


def test_bench_reaches_accuracy_on_planted_signal(bench_dataset):
    row = bench_predictor(bench_dataset.records, bench_dataset.hidden_scores, PipelineParams())

    assert row.accuracy >= 0.95
    assert row.rmse <= 1.0
    assert row.n_train + row.n_test == 5000
    assert row.n_test == 1000


def test_bench_with_shuffled_labels_falls_to_majority_rate(bench_dataset):
    row = bench_predictor(bench_dataset.records, bench_dataset.hidden_scores, PipelineParams(), shuffle_labels=True)

    assert abs(row.accuracy - row.majority_frequency) <= 0.05


def test_bench_table_json(synthetic_small, tmp_path):
    params = PipelineParams(forest=ForestParams(trees=10))
    row = bench_predictor(synthetic_small.records, synthetic_small.hidden_scores, params, split_fraction=0.25)
    path = tmp_path / "bench.json"

    emit_table([row], BENCH_COLUMNS, path, fmt="json")

    payload = json.loads(path.read_text())
    assert payload["rows"][0]["n_test"] == 100
    assert set(payload["rows"][0]) == set(BENCH_COLUMNS)


@pytest.mark.parametrize("fraction", [0.0, 1.0])
def test_bench_rejects_bad_split(synthetic_small, fraction):
    with pytest.raises(ParameterError):
        bench_predictor(synthetic_small.records, synthetic_small.hidden_scores, PipelineParams(), fraction)


def test_params_from_manifest_layers_overrides():
    sections = {
        "pipeline": {"eps": 0.3, "min_samples": 7, "policy": "weighted", "alpha": 0.5},
        "forest": {"trees": 7, "max_depth": 4},
    }

    params = PipelineParams.from_manifest(sections, forest={"trees": 9}, min_samples=4, eps=None)

    assert params.eps == 0.3
    assert params.min_samples == 4
    assert params.policy == Policy("weighted", 0.5)
    assert params.forest.trees == 9 and params.forest.max_depth == 4


@pytest.mark.parametrize("sections", [{"pipeline": {"epsilon": 0.3}}, {"forest": {"leaves": 3}}])
def test_params_from_manifest_rejects_unknown_keys(sections):
    with pytest.raises(ValueError, match="unknown key"):
        PipelineParams.from_manifest(sections)


def test_params_reject_unknown_featurization():
    with pytest.raises(ParameterError):
        PipelineParams(featurization="lda")
