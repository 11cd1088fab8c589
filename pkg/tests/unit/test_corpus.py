"""Unit tests for feed parsing and snapshot construction."""

from __future__ import annotations

import io
import json
import logging
from datetime import date

import pytest

from risk_manager.core.corpus import (
    CveStatus,
    CvssVersion,
    EpssEntry,
    build_snapshot,
    dump_catalog,
    dump_cve_feed,
    dump_epss_csv,
    dump_exploit_index,
    exploit_index_rows,
    is_cve_id,
    load_catalog,
    parse_cve_feed,
    parse_epss_csv,
    parse_exploit_index,
    record_as_of,
)
from risk_manager.core.errors import FeedFormatError, ParameterError, ValidationError
from tests.unit.conftest import make_node, make_record


def _line(**overrides) -> str:
    item = {
        "id": "CVE-2023-0001",
        "description": "Stack overflow in parser",
        "published": "2023-01-02",
        "modified": "2023-01-05",
        "status": "Analyzed",
        "cvss_base": 7.5,
        "products": ["vendor:product:1.0"],
        "patched": False,
        "exploited": False,
    }
    item.update(overrides)
    return json.dumps({k: v for k, v in item.items() if v is not ...})


def test_parse_cve_feed_reads_fixture(fixtures):
    with open(fixtures / "cves.jsonl", "rb") as f:
        records = parse_cve_feed(f)

    assert [r.id for r in records][:3] == ["CVE-2017-11882", "CVE-2021-44228", "CVE-2022-0847"]
    office = records[0]
    assert office.status is CveStatus.ANALYZED
    assert office.cvss_base == 7.8
    assert office.cvss_version is CvssVersion.V3
    assert office.cvss_metrics["AV"] == "L"
    assert office.published_date == date(2017, 11, 15)
    received = [r.id for r in records if not r.analyzed]
    assert received == ["CVE-2023-1003", "CVE-2023-2001", "CVE-2023-2004"]


@pytest.mark.parametrize("cve_id,ok", [
    ("CVE-2017-11882", True),
    ("CVE-2023-123456", True),
    ("CVE-2023-123", False),
    ("cve-2023-1234", False),
    ("CVE-23-1234", False),
])
def test_is_cve_id(cve_id, ok):
    assert is_cve_id(cve_id) is ok


def test_parse_cve_feed_reports_line_of_bad_record():
    feed = "\n".join([_line(), _line(id="CVE-2023-0002", cvss_base=11.0)])

    with pytest.raises(ValidationError) as exc:
        parse_cve_feed(io.StringIO(feed))

    assert exc.value.line == 2
    assert str(exc.value).startswith("line 2:")


@pytest.mark.parametrize("overrides", [
    {"status": "Received"},  # Received must not carry a score
    {"status": "Analyzed", "cvss_base": ...},
    {"products": []},
    {"products": ["not-a-key"]},
    {"description": "   "},
    {"modified": "2022-12-31"},
    {"id": "CVE-1"},
    {"status": "Rejected"},
])
def test_parse_cve_feed_rejects_invariant_violations(overrides):
    with pytest.raises(ValidationError):
        parse_cve_feed(io.StringIO(_line(**overrides)))


@pytest.mark.parametrize("line", ["{not json", "[1, 2]", json.dumps({"id": "CVE-2023-0001"})])
def test_parse_cve_feed_rejects_malformed_lines(line):
    with pytest.raises(FeedFormatError) as exc:
        parse_cve_feed(io.StringIO(line))
    assert exc.value.line == 1


def test_parse_cve_feed_rejects_duplicate_ids():
    feed = "\n".join([_line(), "", _line()])

    with pytest.raises(ValidationError, match="duplicate CVE id"):
        parse_cve_feed(io.StringIO(feed))


def test_parse_cve_feed_rejects_unknown_field():
    with pytest.raises(FeedFormatError, match="unknown field"):
        parse_cve_feed(io.StringIO(_line(severity="HIGH")))


def test_parse_cve_feed_prefers_v3_metrics():
    line = _line(metrics={"V2": {"AV": "N"}, "V3": {"AV": "L"}}, cvss_version="2.0")

    record = parse_cve_feed(io.StringIO(line))[0]

    assert record.cvss_metrics == {"AV": "L"}
    assert record.cvss_version is CvssVersion.V3


def test_dump_cve_feed_round_trips_fixture(fixtures):
    raw = (fixtures / "cves.jsonl").read_bytes()
    records = parse_cve_feed(io.BytesIO(raw))

    out = io.BytesIO()
    dump_cve_feed(records, out)

    assert parse_cve_feed(io.BytesIO(out.getvalue())) == records


@pytest.mark.parametrize("separator", ["\u2028", "\u2029", "\u0085"])
def test_dump_cve_feed_round_trips_unicode_line_separators(separator):
    records = [
        make_record("CVE-2023-0100", ["vendor:product:1.0"], None, description=f"Overflow in parser{separator}second line"),
        make_record("CVE-2023-0101", ["vendor:product:1.0"], 6.1),
    ]
    out = io.BytesIO()

    dump_cve_feed(records, out)

    assert out.getvalue().count(b"\n") == 2
    assert parse_cve_feed(io.BytesIO(out.getvalue())) == records


def test_parse_cve_feed_accepts_crlf_line_endings():
    text = _line() + "\r\n" + _line(id="CVE-2023-0002") + "\r\n"

    records = parse_cve_feed(io.BytesIO(text.encode("utf-8")))

    assert [r.id for r in records] == ["CVE-2023-0001", "CVE-2023-0002"]


def test_parse_epss_csv_uses_score_date_comment(fixtures):
    with open(fixtures / "epss.csv", "rb") as f:
        entries = parse_epss_csv(f)

    assert entries[0] == EpssEntry("CVE-2017-11882", 0.9799, 0.9999, date(2023, 6, 30))
    assert {e.model_date for e in entries} == {date(2023, 6, 30)}


def test_parse_epss_csv_without_comment_needs_model_date():
    text = "cve,epss,percentile\nCVE-2023-0001,0.5,0.9\n"

    with pytest.raises(ParameterError):
        parse_epss_csv(io.StringIO(text))

    entries = parse_epss_csv(io.StringIO(text), date(2023, 1, 1))
    assert entries[0].probability == 0.5


@pytest.mark.parametrize("text,error", [
    ("cve,score\nCVE-2023-0001,0.5\n", FeedFormatError),
    ("cve,epss,percentile\nCVE-2023-0001,1.5,0.9\n", ValidationError),
    ("cve,epss,percentile\nCVE-2023-0001,abc,0.9\n", ValidationError),
    ("cve,epss,percentile\nnot-a-cve,0.1,0.9\n", ValidationError),
])
def test_parse_epss_csv_rejects_bad_rows(text, error):
    with pytest.raises(error):
        parse_epss_csv(io.StringIO(text), date(2023, 1, 1))


def test_dump_epss_csv_reads_back():
    entries = [EpssEntry("CVE-2023-0001", 0.25, 0.5, date(2023, 2, 1))]
    out = io.StringIO()

    dump_epss_csv(entries, out, date(2023, 2, 1))

    assert parse_epss_csv(io.StringIO(out.getvalue())) == entries


def test_parse_exploit_index_skips_rows_without_cve(fixtures, caplog):
    with caplog.at_level(logging.WARNING):
        with open(fixtures / "exploits.csv", "rb") as f:
            exploited = parse_exploit_index(f)

    assert exploited == frozenset({"CVE-2017-11882", "CVE-2021-44228", "CVE-2021-45046"})
    assert "Skipped 1 exploit index row" in caplog.text


def test_parse_exploit_index_requires_codes_column():
    with pytest.raises(FeedFormatError):
        parse_exploit_index(io.StringIO("id,description\n1,foo\n"))


def test_exploit_index_rows_cover_exploited_records():
    records = [
        make_record("CVE-2023-0001", ["a:b:1"], exploited=True),
        make_record("CVE-2023-0002", ["a:b:1"]),
    ]

    rows = exploit_index_rows(records)
    out = io.StringIO()
    dump_exploit_index(records, out)

    assert [row["codes"] for row in rows] == ["CVE-2023-0001"]
    assert parse_exploit_index(io.StringIO(out.getvalue())) == frozenset({"CVE-2023-0001"})


def test_load_catalog_fixture(fixtures):
    with open(fixtures / "catalog.json") as f:
        catalog = load_catalog(f)

    by_name = {node.name: node for node in catalog}
    assert len(catalog) == 7
    assert "openbsd:openssh:9.3" in by_name["solaris-11.4"].product_keys


@pytest.mark.parametrize("payload", [
    {"nodes": []},
    {"nodes": [{"name": "a", "products": []}]},
    {"nodes": [{"name": "a", "products": ["x:y:1"]}, {"name": "a", "products": ["x:y:2"]}]},
    {"hosts": []},
])
def test_load_catalog_rejects_bad_manifests(payload):
    with pytest.raises(ValidationError):
        load_catalog(io.StringIO(json.dumps(payload)))


def test_dump_catalog_reads_back():
    catalog = frozenset({make_node("b", "x:y:2"), make_node("a", "x:y:1", "lib:z:1")})
    out = io.StringIO()

    dump_catalog(catalog, out)

    assert load_catalog(io.StringIO(out.getvalue())) == catalog


def test_snapshot_filters_merges_and_defaults(feed, as_of):
    snapshot = feed.snapshot(as_of)

    assert "CVE-2023-2004" not in snapshot.records  # published after as_of
    assert list(snapshot.records) == sorted(snapshot.records)
    assert snapshot.records["CVE-2017-11882"].exploited is True  # from the exploit index
    assert snapshot.epss_for("CVE-2017-11882") == 0.9799
    assert snapshot.epss_for("CVE-2023-2001") == 0.0
    # analyzed after as_of, so still waiting for a score
    assert snapshot.records["CVE-2023-2005"].status is CveStatus.RECEIVED
    assert snapshot.received_ids() == ["CVE-2023-1003", "CVE-2023-2001", "CVE-2023-2005"]


def test_record_as_of_withholds_later_analysis():
    record = make_record("CVE-2023-0001", ["a:b:1"], 6.1, last_modified=date(2023, 3, 1),
                         cvss_metrics={"AV": "N"})

    before = record_as_of(record, date(2023, 2, 1))
    after = record_as_of(record, date(2023, 3, 1))

    assert before.status is CveStatus.RECEIVED
    assert before.cvss_base is None and before.cvss_metrics == {}
    assert after is record


def test_build_snapshot_keeps_last_duplicate_epss_row(caplog):
    records = [make_record("CVE-2023-0001", ["a:b:1"])]
    epss = [
        EpssEntry("CVE-2023-0001", 0.1, 0.2, date(2023, 1, 1)),
        EpssEntry("CVE-2023-0001", 0.3, 0.4, date(2023, 1, 1)),
    ]

    with caplog.at_level(logging.WARNING):
        snapshot = build_snapshot(records, epss, [], [], date(2023, 6, 30))

    assert snapshot.epss_for("CVE-2023-0001") == 0.3
    assert "Duplicate EPSS rows for CVE-2023-0001" in caplog.text


def test_snapshot_id_is_content_addressed(feed, as_of):
    first = feed.snapshot(as_of)
    again = feed.snapshot(as_of)
    later = feed.snapshot(date(2023, 8, 31))

    assert first.snapshot_id == again.snapshot_id
    assert first.snapshot_id != later.snapshot_id
    assert len(first.snapshot_id) == 16
