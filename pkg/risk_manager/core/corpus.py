"""Vulnerability intelligence ingestion.

Parses the CVE feed (JSON Lines), the EPSS export (CSV), the exploit index
(CSV with a ``codes`` column) and the node catalog (JSON), and merges them
into an immutable CorpusSnapshot as of a simulated "now".
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import IO

from risk_manager.core.errors import FeedFormatError, ParameterError, ValidationError

logger = logging.getLogger(__name__)

CVE_ID_PATTERN = re.compile(r"CVE-\d{4}-\d{4,}")
_SCORE_DATE = re.compile(r"score_date:(\d{4}-\d{2}-\d{2})")

FEED_FIELDS = (
    "id",
    "description",
    "published",
    "modified",
    "status",
    "cvss_base",
    "cvss_version",
    "metrics",
    "products",
    "patched",
    "exploited",
)
_REQUIRED_FEED_FIELDS = {"id", "description", "published", "modified", "status", "products", "patched", "exploited"}

EPSS_HEADER = ["cve", "epss", "percentile"]


class CveStatus(str, Enum):
    RECEIVED = "Received"
    ANALYZED = "Analyzed"


class CvssVersion(str, Enum):
    V2 = "2.0"
    V3 = "3.1"


_VERSION_ALIASES = {"2.0": CvssVersion.V2, "3.0": CvssVersion.V3, "3.1": CvssVersion.V3}


def is_cve_id(value: str) -> bool:
    return bool(CVE_ID_PATTERN.fullmatch(value))


def _check_product_key(key: str) -> None:
    parts = key.split(":", 2)
    if len(parts) != 3 or not all(parts):
        raise ValidationError(f"product key must be vendor:product:version, got {key!r}")


@dataclass(frozen=True)
class CveRecord:
    id: str
    description: str
    published_date: date
    last_modified: date
    status: CveStatus
    affected_products: frozenset[str]
    patched: bool = False
    exploited: bool = False
    cvss_base: float | None = None
    cvss_version: CvssVersion | None = None
    cvss_metrics: Mapping[str, str] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if not is_cve_id(self.id):
            raise ValidationError(f"invalid CVE identifier {self.id!r}")
        if not self.description or not self.description.strip():
            raise ValidationError(f"{self.id}: description is empty")
        if self.last_modified < self.published_date:
            raise ValidationError(f"{self.id}: last_modified precedes published_date")
        if not self.affected_products:
            raise ValidationError(f"{self.id}: affected_products is empty")
        for key in self.affected_products:
            _check_product_key(key)
        if self.status is CveStatus.ANALYZED:
            if self.cvss_base is None:
                raise ValidationError(f"{self.id}: Analyzed record without cvss_base")
            if not 0.0 <= self.cvss_base <= 10.0:
                raise ValidationError(f"{self.id}: cvss_base {self.cvss_base} outside [0, 10]")
        elif self.cvss_base is not None:
            raise ValidationError(f"{self.id}: Received record must not carry cvss_base")

    @property
    def analyzed(self) -> bool:
        return self.status is CveStatus.ANALYZED

    def to_feed_dict(self) -> dict:
        """Return the feed representation with the canonical key order."""
        item: dict = {
            "id": self.id,
            "description": self.description,
            "published": self.published_date.isoformat(),
            "modified": self.last_modified.isoformat(),
            "status": self.status.value,
        }
        if self.cvss_base is not None:
            item["cvss_base"] = self.cvss_base
        if self.cvss_version is not None:
            item["cvss_version"] = self.cvss_version.value
        if self.cvss_metrics:
            item["metrics"] = {k: self.cvss_metrics[k] for k in sorted(self.cvss_metrics)}
        item["products"] = sorted(self.affected_products)
        item["patched"] = self.patched
        item["exploited"] = self.exploited
        return item


@dataclass(frozen=True)
class EpssEntry:
    cve_id: str
    probability: float
    percentile: float
    model_date: date

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"{self.cve_id}: EPSS probability {self.probability} outside [0, 1]")
        if not 0.0 <= self.percentile <= 1.0:
            raise ValidationError(f"{self.cve_id}: EPSS percentile {self.percentile} outside [0, 1]")


@dataclass(frozen=True)
class NodeIdentity:
    name: str
    product_keys: frozenset[str]

    def __post_init__(self):
        if not self.name:
            raise ValidationError("node name is empty")
        if not self.product_keys:
            raise ValidationError(f"node {self.name!r} has no product keys")
        for key in self.product_keys:
            _check_product_key(key)


@dataclass(frozen=True)
class CorpusSnapshot:
    as_of: date
    records: Mapping[str, CveRecord] = field(hash=False)
    epss: Mapping[str, float] = field(hash=False)
    catalog: frozenset[NodeIdentity]

    def received_ids(self) -> list[str]:
        return [cid for cid, record in self.records.items() if not record.analyzed]

    def analyzed_ids(self) -> list[str]:
        return [cid for cid, record in self.records.items() if record.analyzed]

    def epss_for(self, cve_id: str) -> float:
        return self.epss.get(cve_id, 0.0)

    def nodes(self) -> list[NodeIdentity]:
        """Catalog nodes in canonical (ascending name) order."""
        return sorted(self.catalog, key=lambda node: node.name)

    @cached_property
    def snapshot_id(self) -> str:
        payload = {
            "as_of": self.as_of.isoformat(),
            "records": [record.to_feed_dict() for record in self.records.values()],
            "epss": [[cid, p] for cid, p in self.epss.items()],
            "catalog": [[node.name, sorted(node.product_keys)] for node in self.nodes()],
        }
        encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(encoded.encode("utf-8")).hexdigest()[:16]


def _read_lines(stream: IO) -> list[str]:
    data = stream.read()
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FeedFormatError(f"input is not valid UTF-8: {exc}") from exc
    # only "\n" ends a line; JSON strings may hold U+2028 and friends unescaped
    lines = data.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [line[:-1] if line.endswith("\r") else line for line in lines]


def _parse_date(value, name: str) -> date:
    if not isinstance(value, str):
        raise FeedFormatError(f"{name} must be an ISO-8601 date string")
    try:
        return date.fromisoformat(value[:10])
    except ValueError as exc:
        raise FeedFormatError(f"{name} is not an ISO-8601 date: {value!r}") from exc


def _parse_metrics(raw) -> tuple[dict[str, str], CvssVersion | None]:
    """Flatten feed metrics; a versioned mapping resolves to V3 when present."""
    if raw is None:
        return {}, None
    if not isinstance(raw, dict):
        raise FeedFormatError("metrics must be an object")
    if "V3" in raw or "V2" in raw:
        version = CvssVersion.V3 if "V3" in raw else CvssVersion.V2
        chosen = raw["V3"] if "V3" in raw else raw["V2"]
        if not isinstance(chosen, dict):
            raise FeedFormatError(f"metrics.{version.name} must be an object")
        return {str(k): str(v) for k, v in chosen.items()}, version
    return {str(k): str(v) for k, v in raw.items()}, None


def record_from_feed_dict(item: dict) -> CveRecord:
    unknown = sorted(set(item) - set(FEED_FIELDS))
    if unknown:
        raise FeedFormatError(f"unknown field(s) {unknown}")
    missing = sorted(_REQUIRED_FEED_FIELDS - set(item))
    if missing:
        raise FeedFormatError(f"missing field(s) {missing}")

    try:
        status = CveStatus(item["status"])
    except ValueError as exc:
        raise ValidationError(f"status must be Received or Analyzed, got {item['status']!r}") from exc

    base = item.get("cvss_base")
    if base is not None and (isinstance(base, bool) or not isinstance(base, (int, float))):
        raise ValidationError(f"cvss_base must be a number, got {base!r}")

    metrics, metrics_version = _parse_metrics(item.get("metrics"))
    version = metrics_version
    if version is None and item.get("cvss_version") is not None:
        try:
            version = _VERSION_ALIASES[str(item["cvss_version"])]
        except KeyError as exc:
            raise ValidationError(f"unsupported cvss_version {item['cvss_version']!r}") from exc

    products = item["products"]
    if not isinstance(products, list) or not all(isinstance(p, str) for p in products):
        raise FeedFormatError("products must be an array of strings")
    for flag in ("patched", "exploited"):
        if not isinstance(item[flag], bool):
            raise FeedFormatError(f"{flag} must be a boolean")

    return CveRecord(
        id=str(item["id"]),
        description=str(item["description"]),
        published_date=_parse_date(item["published"], "published"),
        last_modified=_parse_date(item["modified"], "modified"),
        status=status,
        affected_products=frozenset(products),
        patched=item["patched"],
        exploited=item["exploited"],
        cvss_base=float(base) if base is not None else None,
        cvss_version=version,
        cvss_metrics=metrics,
    )


def parse_cve_feed(stream: IO) -> list[CveRecord]:
    """Parse a JSON Lines CVE feed, preserving source order."""
    records: list[CveRecord] = []
    first_seen: dict[str, int] = {}
    for line_no, line in enumerate(_read_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FeedFormatError(f"malformed JSON: {exc.msg}", line=line_no) from exc
        if not isinstance(item, dict):
            raise FeedFormatError("expected a JSON object", line=line_no)
        try:
            record = record_from_feed_dict(item)
        except ValidationError as exc:
            raise type(exc)(exc.detail, line=line_no) from exc

        if record.id in first_seen:
            raise ValidationError(
                f"duplicate CVE id {record.id} (first on line {first_seen[record.id]})", line=line_no
            )
        first_seen[record.id] = line_no
        records.append(record)
    return records


def dump_cve_feed(records: Iterable[CveRecord], stream: IO[bytes]) -> None:
    for record in records:
        line = json.dumps(record.to_feed_dict(), ensure_ascii=False, separators=(",", ":"))
        stream.write(line.encode("utf-8") + b"\n")


def parse_epss_csv(stream: IO, model_date: date | None = None) -> list[EpssEntry]:
    """Parse an EPSS export (``cve,epss,percentile``).

    The model date comes from a leading ``#model_version:...,score_date:...``
    comment when present, otherwise from ``model_date``.
    """
    lines = _read_lines(stream)
    offset = 0
    if lines and lines[0].startswith("#"):
        match = _SCORE_DATE.search(lines[0])
        if match:
            model_date = date.fromisoformat(match.group(1))
        offset = 1

    rows = list(csv.reader(lines[offset:]))
    if not rows or [cell.strip() for cell in rows[0]] != EPSS_HEADER:
        raise FeedFormatError("missing EPSS header 'cve,epss,percentile'", line=offset + 1)
    if model_date is None:
        raise ParameterError("EPSS file has no score_date comment and no model date was given")

    entries = []
    for line_no, row in enumerate(rows[1:], start=offset + 2):
        if not row:
            continue
        if len(row) != 3:
            raise FeedFormatError(f"expected 3 columns, got {len(row)}", line=line_no)
        cve_id, raw_prob, raw_pct = (cell.strip() for cell in row)
        if not is_cve_id(cve_id):
            raise ValidationError(f"invalid CVE identifier {cve_id!r}", line=line_no)
        try:
            probability, percentile = float(raw_prob), float(raw_pct)
        except ValueError as exc:
            raise ValidationError(f"non-numeric EPSS value in {row}", line=line_no) from exc
        try:
            entries.append(EpssEntry(cve_id, probability, percentile, model_date))
        except ValidationError as exc:
            raise ValidationError(exc.detail, line=line_no) from exc
    return entries


def parse_exploit_index(stream: IO) -> frozenset[str]:
    """Return every CVE id referenced by at least one exploit entry."""
    reader = csv.DictReader(_read_lines(stream))
    if reader.fieldnames is None or "codes" not in reader.fieldnames:
        raise FeedFormatError("exploit index has no 'codes' column")

    exploited: set[str] = set()
    skipped = 0
    for row in reader:
        codes = [code.strip() for code in (row.get("codes") or "").split(";")]
        ids = [code for code in codes if is_cve_id(code)]
        if not ids:
            skipped += 1
            continue
        exploited.update(ids)

    if skipped:
        logger.warning("Skipped %d exploit index row(s) without a CVE id", skipped)
    return frozenset(exploited)


def exploit_index_rows(records: Iterable[CveRecord]) -> list[dict]:
    """Exploit index rows (``id,description,codes``) for records flagged exploited."""
    return [
        {"id": str(n), "description": f"Exploit for {r.id}", "codes": r.id}
        for n, r in enumerate((r for r in records if r.exploited), start=1)
    ]


def dump_exploit_index(records: Iterable[CveRecord], stream: IO[str]) -> None:
    writer = csv.DictWriter(stream, fieldnames=["id", "description", "codes"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(exploit_index_rows(records))


def dump_epss_csv(entries: Iterable[EpssEntry], stream: IO[str], model_date: date) -> None:
    stream.write(f"#model_version:synthetic,score_date:{model_date.isoformat()}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(EPSS_HEADER)
    for entry in entries:
        writer.writerow([entry.cve_id, repr(entry.probability), repr(entry.percentile)])


def load_catalog(stream: IO) -> frozenset[NodeIdentity]:
    """Load the node catalog: ``{"nodes": [{"name": ..., "products": [...]}]}``."""
    try:
        manifest = json.loads(stream.read())
    except json.JSONDecodeError as exc:
        raise FeedFormatError(f"catalog is not valid JSON: {exc.msg}") from exc

    nodes = manifest.get("nodes") if isinstance(manifest, dict) else None
    if not isinstance(nodes, list) or not nodes:
        raise ValidationError("catalog: expected a non-empty 'nodes' list")

    catalog = {}
    for entry in nodes:
        if not isinstance(entry, dict) or not isinstance(entry.get("products"), list):
            raise FeedFormatError(f"catalog entry must have 'name' and 'products': {entry!r}")
        name = str(entry.get("name", ""))
        if name in catalog:
            raise ValidationError(f"catalog: duplicate node name {name!r}")
        catalog[name] = NodeIdentity(name, frozenset(entry["products"]))
    return frozenset(catalog.values())


def dump_catalog(catalog: Iterable[NodeIdentity], stream: IO[str]) -> None:
    nodes = [
        {"name": node.name, "products": sorted(node.product_keys)}
        for node in sorted(catalog, key=lambda n: n.name)
    ]
    json.dump({"nodes": nodes}, stream, indent=2)
    stream.write("\n")


def record_as_of(record: CveRecord, as_of: date) -> CveRecord:
    """The record as published on ``as_of``.

    An Analyzed record modified after ``as_of`` had not been scored yet.
    """
    if record.analyzed and record.last_modified > as_of:
        return replace(
            record,
            status=CveStatus.RECEIVED,
            cvss_base=None,
            cvss_version=None,
            cvss_metrics={},
        )
    return record


def build_snapshot(
    records: Iterable[CveRecord],
    epss: Iterable[EpssEntry],
    exploited_ids: Iterable[str],
    catalog: Iterable[NodeIdentity],
    as_of: date,
) -> CorpusSnapshot:
    """Merge feed, EPSS and exploit data into the view as of ``as_of``."""
    if not isinstance(as_of, date):
        raise ParameterError(f"as_of must be a date, got {as_of!r}")

    exploited = frozenset(exploited_ids)
    kept: dict[str, CveRecord] = {}
    for record in records:
        if record.published_date > as_of:
            continue
        if record.id in kept:
            raise ValidationError(f"duplicate CVE id {record.id}")
        if not record.exploited and record.id in exploited:
            record = replace(record, exploited=True)
        kept[record.id] = record

    probabilities: dict[str, float] = {}
    for entry in epss:
        if entry.cve_id in probabilities:
            logger.warning("Duplicate EPSS rows for %s; keeping the last one", entry.cve_id)
        probabilities[entry.cve_id] = entry.probability

    ordered = {cid: kept[cid] for cid in sorted(kept)}
    return CorpusSnapshot(
        as_of=as_of,
        records=MappingProxyType(ordered),
        epss=MappingProxyType({cid: probabilities.get(cid, 0.0) for cid in ordered}),
        catalog=frozenset(catalog),
    )
