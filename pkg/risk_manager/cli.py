"""Command-line entry point.

Usage:
  risk-manager generate --out data/                                  # synthetic feed files
  risk-manager advise --cve data/cves.jsonl --catalog data/catalog.json --nodes 4
  risk-manager simulate --cve ... --catalog ... --as-of 2022-12-31 --months 12
  risk-manager serve --cve ... --catalog ... --port 8000

Every subcommand writes its primary output to ``--out`` or stdout. Exit codes:
0 success, 1 invalid input or usage, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from datetime import date
from pathlib import Path

import pandas as pd

from risk_manager.backends.http.server import AdviseServer
from risk_manager.backends.memory.state import InMemorySnapshotStore
from risk_manager.core import harness
from risk_manager.core.cluster import ALGORITHMS, export_assignment_csv, export_reachability_csv, run_clustering
from risk_manager.core.configurator import Policy, advise, ranking_to_csv, ranking_to_json
from risk_manager.core.corpus import (
    dump_catalog,
    dump_cve_feed,
    dump_epss_csv,
    dump_exploit_index,
    parse_cve_feed,
)
from risk_manager.core.errors import ParameterError
from risk_manager.core.predictor import FEATURIZATIONS, load_model, save_model
from risk_manager.core.scoring import SCORE_FIELDS, assess_all, export_assessed_csv
from risk_manager.core.service import ServiceContext, load_snapshot
from risk_manager.core.synthetic import GeneratorSpec, generate_synthetic_dataset, synthetic_embeddings
from risk_manager.core.textfeat import dump_embeddings, load_embeddings
from risk_manager.shared.config import DEFAULT_SEED, LOG_LEVEL, SERVICE_HOST, SERVICE_PORT, load_manifest

logger = logging.getLogger(__name__)

EMBEDDING_DIMENSION = 32
SUMMARY_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits 1 on usage errors, like any other invalid input."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _iso_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from exc


# ---- Shared helpers ----


@contextlib.contextmanager
def _output(path: str | None):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as f:
            yield f


def _write_text(path: str | None, text: str) -> None:
    with _output(path) as stream:
        stream.write(text)


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in names if getattr(args, name) is None]
    if missing:
        raise ParameterError(f"{args.command} requires {', '.join(missing)}")


def _seed(args: argparse.Namespace, sections: dict[str, dict]) -> int:
    if args.seed is not None:
        return args.seed
    return int(sections["pipeline"].get("seed", DEFAULT_SEED()))


def _pipeline_params(args: argparse.Namespace, *, predictor: bool = False, cells: bool = False) -> harness.PipelineParams:
    """Manifest values overridden by whatever flags were given.

    ``--feat`` picks the predictor featurization for predictor-only commands and
    the clustering featurization otherwise. ``cells`` leaves ``--algo``/``--feat``
    to the comparison grid.
    """
    sections = load_manifest(args.params)
    policy = None
    if args.policy is not None or args.alpha is not None:
        policy = Policy.parse(args.policy or "weighted", args.alpha)

    overrides = {
        "nodes": args.nodes,
        "policy": policy,
        "eps": args.eps,
        "min_samples": args.min_samples,
        "xi": args.xi,
        "k": args.k,
        "min_df": args.min_df,
        "stem": args.stem,
        "bin_width": args.bin_width,
        "score_field": args.score_field,
        "seed": _seed(args, sections),
    }
    if not cells:
        overrides["algorithm"] = args.algo
        overrides["predictor_featurization" if predictor else "featurization"] = args.feat
    forest = {"trees": args.trees} if args.trees is not None else {}
    return harness.PipelineParams.from_manifest(sections, forest=forest, **overrides)


def _load_feed(args: argparse.Namespace, *, catalog: bool = True) -> harness.Feed:
    _require(args, "cve", *(("catalog",) if catalog else ()))
    return harness.load_feed(args.cve, args.catalog, args.epss, args.exploits, args.epss_date)


def _as_of(args: argparse.Namespace, feed: harness.Feed) -> date:
    """``--as-of`` or, failing that, the newest date seen in the feed."""
    if args.as_of is not None:
        return args.as_of
    if not feed.records:
        raise ParameterError("empty CVE feed and no --as-of")
    return max(max(r.published_date, r.last_modified) for r in feed.records)


def _embeddings(args: argparse.Namespace):
    if args.emb is None:
        return None
    with open(args.emb, "rb") as f:
        return load_embeddings(f)


def _model_or_train(args: argparse.Namespace, snapshot, params, embeddings):
    if args.model is not None:
        return load_model(args.model)
    if not snapshot.received_ids():
        return None
    return harness.train_predictor(snapshot, params, embeddings)


# ---- Subcommands ----


def cmd_ingest(args: argparse.Namespace) -> int:
    feed = _load_feed(args, catalog=False)
    snapshot = feed.snapshot(_as_of(args, feed))
    scored = {entry.cve_id for entry in feed.epss}
    summary = {
        "version": SUMMARY_VERSION,
        "snapshot_id": snapshot.snapshot_id,
        "as_of": snapshot.as_of.isoformat(),
        "records": len(snapshot.records),
        "analyzed": len(snapshot.analyzed_ids()),
        "received": len(snapshot.received_ids()),
        "exploited": sum(1 for r in snapshot.records.values() if r.exploited),
        "with_epss": sum(1 for cid in snapshot.records if cid in scored),
        "nodes": [node.name for node in snapshot.nodes()],
    }
    _write_text(args.out, json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    target = args.model or args.out
    if target is None:
        raise ParameterError("train requires --model or --out")
    feed = _load_feed(args, catalog=False)
    params = _pipeline_params(args, predictor=True)
    model = harness.train_predictor(feed.snapshot(_as_of(args, feed)), params, _embeddings(args))
    save_model(model, target)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    feed = _load_feed(args, catalog=False)
    snapshot = feed.snapshot(_as_of(args, feed))
    params = _pipeline_params(args, predictor=True)
    embeddings = _embeddings(args)
    model = _model_or_train(args, snapshot, params, embeddings)
    predictions = harness.predict_received(snapshot, model, embeddings) if model is not None else {}

    with _output(args.out) as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["cve_id", "label", "interval", "score", "vote_fraction"])
        for cve_id in sorted(predictions):
            p = predictions[cve_id]
            writer.writerow([cve_id, p.label, model.binning.describe(p.label), repr(p.score), repr(p.vote_fraction)])
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    feed = _load_feed(args, catalog=False)
    snapshot = feed.snapshot(_as_of(args, feed))
    params = _pipeline_params(args)
    points = harness.cluster_points(snapshot, params, _embeddings(args))
    assignment = run_clustering(points, params.cluster_params)

    with _output(args.out) as stream:
        export_assignment_csv(assignment, stream)
    if args.reachability is not None:
        with open(args.reachability, "w", newline="") as f:
            export_reachability_csv(assignment, f)
    return 0


def cmd_assess(args: argparse.Namespace) -> int:
    feed = _load_feed(args, catalog=False)
    snapshot = feed.snapshot(_as_of(args, feed))
    params = _pipeline_params(args, predictor=True)
    embeddings = _embeddings(args)
    model = _model_or_train(args, snapshot, params, embeddings)
    predictions = harness.predict_received(snapshot, model, embeddings) if model is not None else {}
    assessed = assess_all(snapshot, predictions, params.oldness_threshold)

    with _output(args.out) as stream:
        export_assessed_csv(assessed, stream)
    return 0


def cmd_advise(args: argparse.Namespace) -> int:
    feed = _load_feed(args)
    snapshot = feed.snapshot(_as_of(args, feed))
    params = _pipeline_params(args)
    result = harness.run_pipeline(snapshot, params, _embeddings(args))

    ranking = result.ranking
    if args.explain:
        ranking = advise(
            snapshot.catalog, params.nodes, params.policy, result.assessed, snapshot,
            result.clusters, params.score_field, explain=True,
        )
    with _output(args.out) as stream:
        if (args.format or "json") == "json":
            ranking_to_json(ranking, params.policy, params.nodes, stream, explain=args.explain)
        else:
            ranking_to_csv(ranking, stream)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    _require(args, "as_of")
    feed = _load_feed(args)
    rows = harness.simulate_timeline(feed, args.as_of, args.months, _pipeline_params(args), _embeddings(args))
    _write_text(args.out, harness.render_report(rows, args.format or "csv"))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    _require(args, "cve")
    with open(args.cve, "rb") as f:
        records = parse_cve_feed(f)
    hidden: dict[str, float] = {}
    if args.truth is not None:
        truth = pd.read_csv(args.truth, dtype={"cve_id": str, "score": float})
        hidden = dict(zip(truth["cve_id"], truth["score"]))

    params = _pipeline_params(args, predictor=True)
    row = harness.bench_predictor(
        records, hidden, params, args.split,
        shuffle_labels=args.shuffle_labels, embeddings=_embeddings(args),
    )
    _write_text(args.out, harness.emit_table([row], harness.BENCH_COLUMNS, None, args.format or "csv"))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    feed = _load_feed(args)
    snapshot = feed.snapshot(_as_of(args, feed))
    embeddings = _embeddings(args)
    algorithms = args.algo.split(",") if args.algo else list(ALGORITHMS)
    if args.feat:
        featurizations = args.feat.split(",")
    else:
        featurizations = ["bow"] + (["emb"] if embeddings is not None else [])

    rows = harness.compare_clusterings(snapshot, algorithms, featurizations, _pipeline_params(args, cells=True), embeddings)
    _write_text(args.out, harness.emit_table(rows, harness.COMPARE_COLUMNS, None, args.format or "csv"))
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    _require(args, "out")
    sections = load_manifest(args.params)
    spec = GeneratorSpec.from_manifest(sections["generator"])
    if args.total is not None:
        spec = replace(spec, total=args.total)
    if args.received_fraction is not None:
        spec = replace(spec, received_fraction=args.received_fraction)
    seed = _seed(args, sections)
    dataset = generate_synthetic_dataset(spec, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cves.jsonl", "wb") as f:
        dump_cve_feed(dataset.records, f)
    with open(out / "epss.csv", "w", newline="") as f:
        dump_epss_csv(dataset.epss, f, spec.end)
    with open(out / "exploits.csv", "w", newline="") as f:
        dump_exploit_index(dataset.records, f)
    with open(out / "catalog.json", "w") as f:
        dump_catalog(dataset.catalog, f)
    with open(out / "embeddings.csv", "w", newline="") as f:
        dump_embeddings(synthetic_embeddings(dataset.records, EMBEDDING_DIMENSION, seed), f)
    truth = pd.DataFrame(sorted(dataset.hidden_scores.items()), columns=["cve_id", "score"])
    truth.to_csv(out / "truth.csv", index=False, lineterminator="\n")

    logger.info("Wrote %d CVEs over %d nodes to %s", len(dataset.records), len(dataset.catalog), out)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    feed = _load_feed(args)
    as_of = _as_of(args, feed)
    context = ServiceContext(base=feed, params=_pipeline_params(args), as_of=as_of, embeddings=_embeddings(args))
    store = InMemorySnapshotStore()
    with open(args.cve, "rb") as f:
        load_snapshot(store, context, f.read(), as_of.isoformat())

    host = args.host or SERVICE_HOST()
    port = args.port if args.port is not None else SERVICE_PORT()
    server = AdviseServer(store, context, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Advise service stopped")
    return 0


# ---- Parser ----


def _input_flags() -> argparse.ArgumentParser:
    parser = _Parser(add_help=False)
    group = parser.add_argument_group("inputs")
    group.add_argument("--cve", help="CVE feed (JSON Lines)")
    group.add_argument("--epss", help="EPSS CSV")
    group.add_argument("--exploits", help="Exploit index CSV")
    group.add_argument("--catalog", help="Node catalog JSON")
    group.add_argument("--emb", help="Precomputed description embeddings CSV")
    group.add_argument("--as-of", type=_iso_date, help="Snapshot date (default: newest date in the feed)")
    group.add_argument("--epss-date", type=_iso_date, help="EPSS score date when the CSV carries none")
    return parser


def _pipeline_flags() -> argparse.ArgumentParser:
    parser = _Parser(add_help=False)
    group = parser.add_argument_group("pipeline parameters (override the manifest)")
    group.add_argument("--params", help="Parameter manifest (default: RISK_MANAGER_PARAMS or pipeline.json)")
    group.add_argument("--nodes", type=int, help="Replicas per configuration")
    group.add_argument("--policy", help="resilience_first, security_first or weighted[:ALPHA]")
    group.add_argument("--alpha", type=float, help="Weight on resilience for the weighted policy")
    group.add_argument("--algo", help=f"Clustering algorithm: {'|'.join(ALGORITHMS)} (comma list for compare-clustering)")
    group.add_argument("--feat", help=f"Featurization: {'|'.join(FEATURIZATIONS)}, or auto for clustering (comma list for compare-clustering)")
    group.add_argument("--eps", type=float, help="DBSCAN neighbourhood radius (cosine distance)")
    group.add_argument("--min-samples", type=int, help="DBSCAN/OPTICS density threshold")
    group.add_argument("--xi", type=float, help="OPTICS steepness threshold")
    group.add_argument("--k", type=int, help="k-means cluster count")
    group.add_argument("--bin-width", type=float, help="Score interval width")
    group.add_argument("--trees", type=int, help="Random forest size")
    group.add_argument("--min-df", type=int, help="Minimum document frequency for TF-IDF terms")
    group.add_argument("--stem", action="store_true", default=None, help="Porter-stem description tokens")
    group.add_argument("--score-field", choices=SCORE_FIELDS, help="Per-CVE score the configurator sums")
    group.add_argument("--seed", type=int, help="Random seed (default: RISK_MANAGER_SEED or 2023)")
    return parser


def _output_flags() -> argparse.ArgumentParser:
    parser = _Parser(add_help=False)
    parser.add_argument("--out", help="Output path (default: stdout)")
    parser.add_argument("--format", choices=("csv", "json"), help="Output format")
    return parser


def build_parser() -> argparse.ArgumentParser:
    inputs, pipeline, output = _input_flags(), _pipeline_flags(), _output_flags()
    common = [inputs, pipeline, output]

    parser = _Parser(prog="risk-manager", description="Risk manager for diverse replica configurations")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub = subparsers.add_parser("ingest", parents=common, help="Summarize the snapshot built from the feeds")
    sub.set_defaults(handler=cmd_ingest)

    sub = subparsers.add_parser("train", parents=common, help="Train the score predictor and save it")
    sub.add_argument("--model", help="Model file to write")
    sub.set_defaults(handler=cmd_train)

    sub = subparsers.add_parser("predict", parents=common, help="Predict scores of Received CVEs")
    sub.add_argument("--model", help="Trained model (default: train on the snapshot)")
    sub.set_defaults(handler=cmd_predict)

    sub = subparsers.add_parser("cluster", parents=common, help="Cluster CVE descriptions")
    sub.add_argument("--reachability", help="Also write the OPTICS reachability plot CSV here")
    sub.set_defaults(handler=cmd_cluster)

    sub = subparsers.add_parser("assess", parents=common, help="Reassess every CVE in the snapshot")
    sub.add_argument("--model", help="Trained model (default: train on the snapshot)")
    sub.set_defaults(handler=cmd_assess)

    sub = subparsers.add_parser("advise", parents=common, help="Rank replica configurations")
    sub.add_argument("--explain", action="store_true", help="Include the shared CVEs behind each pair")
    sub.set_defaults(handler=cmd_advise)

    sub = subparsers.add_parser("simulate", parents=common, help="Replay the feed month by month")
    sub.add_argument("--months", type=int, default=12, help="Months after --as-of to simulate (default: 12)")
    sub.set_defaults(handler=cmd_simulate)

    sub = subparsers.add_parser("bench", parents=common, help="Benchmark the score predictor")
    sub.add_argument("--truth", help="Hidden scores of Received CVEs (cve_id,score)")
    sub.add_argument("--split", type=float, default=0.2, help="Held-out fraction (default: 0.2)")
    sub.add_argument("--shuffle-labels", action="store_true", help="Shuffle labels for a null-model baseline")
    sub.set_defaults(handler=cmd_bench)

    sub = subparsers.add_parser("compare-clustering", parents=common, help="Compare clusterings by advised risk")
    sub.set_defaults(handler=cmd_compare)

    sub = subparsers.add_parser("generate", parents=[pipeline, output], help="Write a synthetic dataset to --out DIR")
    sub.add_argument("--total", type=int, help="Number of CVEs")
    sub.add_argument("--received-fraction", type=float, help="Fraction left unscored")
    sub.set_defaults(handler=cmd_generate)

    sub = subparsers.add_parser("serve", parents=[inputs, pipeline], help="Serve advice over HTTP")
    sub.add_argument("--host", help="Bind address (default: RISK_MANAGER_HOST or 127.0.0.1)")
    sub.add_argument("--port", type=int, help="Port (default: RISK_MANAGER_PORT or 8000)")
    sub.set_defaults(handler=cmd_serve)

    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1

    try:
        return args.handler(args)
    except OSError as exc:
        logger.error("%s", exc)
        return 2
    except ValueError as exc:
        logger.error("%s", exc)
        return 1


def main() -> None:
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL(), logging.INFO),
        format="%(levelname)s %(name)s %(message)s",
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
