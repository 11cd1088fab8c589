"""Advise service core logic."""

from __future__ import annotations

import io
import logging
from collections.abc import Mapping
from dataclasses import dataclass, replace
from datetime import date

from risk_manager.core.configurator import Policy, advise, ranking_to_dict
from risk_manager.core.corpus import build_snapshot, parse_cve_feed, record_as_of
from risk_manager.core.errors import NoSnapshotError, ParameterError
from risk_manager.core.harness import Feed, PipelineParams, PipelineResult, run_pipeline
from risk_manager.core.interfaces import SnapshotStore
from risk_manager.core.textfeat import FeatureVector

logger = logging.getLogger(__name__)

SERVICE_VERSION = 1
TOP_REPORTS = 10


@dataclass(frozen=True)
class ServiceContext:
    """Inputs the service keeps across snapshot reloads."""

    base: Feed
    params: PipelineParams
    as_of: date
    embeddings: Mapping[str, FeatureVector] | None = None


def get_health(store: SnapshotStore) -> dict:
    result = store.current()
    if result is None:
        return {"version": SERVICE_VERSION, "status": "no snapshot"}
    return {
        "version": SERVICE_VERSION,
        "status": "ok",
        "snapshot_id": result.snapshot.snapshot_id,
        "as_of": result.snapshot.as_of.isoformat(),
        "records": len(result.snapshot.records),
    }


def get_advice(store: SnapshotStore, context: ServiceContext, n: str | None, policy: str | None) -> dict:
    """Ranking head and top reports for the live snapshot."""
    result = store.current()
    if result is None:
        raise NoSnapshotError("no snapshot loaded")

    catalog_size = len(result.snapshot.catalog)
    if n is None:
        count = min(context.params.nodes, catalog_size)
    else:
        try:
            count = int(n)
        except ValueError as exc:
            raise ParameterError(f"n must be an integer, got {n!r}") from exc
    if not 1 <= count <= catalog_size:
        raise ParameterError(f"n must be between 1 and {catalog_size}, got {count}")
    chosen = Policy.parse(policy) if policy else Policy()

    ranking = result.ranking
    if count != len(ranking[0].names) or chosen != context.params.policy:
        ranking = advise(
            result.snapshot.catalog, count, chosen, result.assessed, result.snapshot,
            result.clusters, context.params.score_field,
        )
    body = ranking_to_dict(ranking, chosen, count, top=TOP_REPORTS)
    return {
        "version": SERVICE_VERSION,
        "snapshot_id": result.snapshot.snapshot_id,
        "policy": body["policy"],
        "n": count,
        "head": body["ranking"][0],
        "top": body["ranking"],
    }


def build_result(feed_bytes: bytes, context: ServiceContext, as_of: date | None = None) -> PipelineResult:
    """Run the full pipeline over a posted CVE feed and the service's other inputs."""
    records = parse_cve_feed(io.BytesIO(feed_bytes))
    as_of = as_of or context.as_of
    visible = [record_as_of(r, as_of) for r in records if r.published_date <= as_of]
    snapshot = build_snapshot(visible, context.base.epss, context.base.exploited_ids, context.base.catalog, as_of)
    params = context.params
    if params.nodes > len(snapshot.catalog):
        params = replace(params, nodes=len(snapshot.catalog))
    return run_pipeline(snapshot, params, context.embeddings)


def load_snapshot(store: SnapshotStore, context: ServiceContext, feed_bytes: bytes, as_of: str | None = None) -> dict:
    try:
        day = date.fromisoformat(as_of) if as_of else None
    except ValueError as exc:
        raise ParameterError(f"as_of must be an ISO date, got {as_of!r}") from exc
    result = build_result(feed_bytes, context, day)
    store.swap(result)
    logger.info("Snapshot %s loaded (%d records)", result.snapshot.snapshot_id, len(result.snapshot.records))
    return {
        "version": SERVICE_VERSION,
        "snapshot_id": result.snapshot.snapshot_id,
        "as_of": result.snapshot.as_of.isoformat(),
        "records": len(result.snapshot.records),
    }
