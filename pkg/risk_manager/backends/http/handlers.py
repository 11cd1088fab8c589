"""HTTP handler entry points.

Thin wrappers that take a parsed request event, call the service core logic
in risk_manager/core/service.py and format JSON responses.

Event shape::

    {"requestContext": {"http": {"method": "GET"}}, "rawPath": "/advise",
     "queryStringParameters": {"n": "4"}, "body": ""}
"""

from __future__ import annotations

import json
import logging

from risk_manager.core.errors import NoSnapshotError
from risk_manager.core.interfaces import SnapshotStore
from risk_manager.core.service import ServiceContext, get_advice, get_health, load_snapshot

logger = logging.getLogger(__name__)


def _api_response(status_code: int, body: dict | str, headers: dict | None = None) -> dict:
    response_body = body if isinstance(body, str) else json.dumps(body)
    resp = {
        "statusCode": status_code,
        "headers": {"Content-Type": "application/json"},
        "body": response_body,
    }
    if headers:
        resp["headers"].update(headers)
    return resp


def advise_handler(event: dict, store: SnapshotStore, context: ServiceContext) -> dict:
    method = event.get("requestContext", {}).get("http", {}).get("method", "")
    path = event.get("rawPath", "")
    query = event.get("queryStringParameters") or {}

    try:
        if method == "GET" and path == "/health":
            return _api_response(200, get_health(store))

        if method == "GET" and path == "/advise":
            return _api_response(200, get_advice(store, context, query.get("n"), query.get("policy")))

        if method == "POST" and path == "/snapshot":
            body = event.get("body") or ""
            payload = body.encode("utf-8") if isinstance(body, str) else body
            return _api_response(200, load_snapshot(store, context, payload, query.get("as_of")))
    except NoSnapshotError as exc:
        return _api_response(409, {"error": str(exc)})
    except ValueError as exc:
        return _api_response(400, {"error": str(exc)})

    return _api_response(404, {"error": "not found"})
