"""Risk reassessment of CVE base scores.

The reassessed score discounts old and patched vulnerabilities and boosts
exploited ones. The EPSS-weighted score blends the patched and unpatched
variants by the probability of exploitation in the wild.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from datetime import date
from enum import Enum
from typing import IO

from risk_manager.core.corpus import CorpusSnapshot
from risk_manager.core.errors import MissingAssessmentError
from risk_manager.core.predictor import PredictedScore

logger = logging.getLogger(__name__)

OLDNESS_THRESHOLD_DAYS = 365
OLDNESS_FLOOR = 0.75
PATCHED_FACTOR = 0.5
EXPLOITED_FACTOR = 1.25

SCORE_FIELDS = ("base", "lazarus", "hal", "lazarus_epss")


class Provenance(str, Enum):
    OFFICIAL = "official"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class Factors:
    oldness: float
    patched: float
    exploited: float
    epss: float


@dataclass(frozen=True)
class AssessedScore:
    cve_id: str
    base: float
    base_provenance: Provenance
    lazarus: float
    lazarus_wp: float
    hal: float
    factors: Factors

    def value(self, field: str) -> float:
        """The score named by ``field``; ``lazarus_epss`` is the reassessed score times EPSS."""
        if field == "base":
            return self.base
        if field == "lazarus":
            return self.lazarus
        if field == "hal":
            return self.hal
        if field == "lazarus_epss":
            return self.lazarus * self.factors.epss
        raise ValueError(f"unknown score field {field!r}; expected one of {SCORE_FIELDS}")


def oldness(published: date, now: date, threshold_days: int = OLDNESS_THRESHOLD_DAYS) -> float:
    if now < published:
        raise ValueError(f"now ({now}) precedes the publication date ({published})")
    if threshold_days <= 0:
        raise ValueError(f"threshold_days must be positive, got {threshold_days}")
    elapsed = (now - published).days
    return max(1.0 - 0.25 * elapsed / threshold_days, OLDNESS_FLOOR)


def patched_factor(patched: bool) -> float:
    return PATCHED_FACTOR if patched else 1.0


def exploited_factor(exploited: bool) -> float:
    return EXPLOITED_FACTOR if exploited else 1.0


def lazarus_score(
    base: float,
    published: date,
    now: date,
    patched: bool,
    exploited: bool,
    threshold_days: int = OLDNESS_THRESHOLD_DAYS,
) -> float:
    if not 0.0 <= base <= 10.0:
        raise ValueError(f"base score {base} outside [0, 10]")
    return base * oldness(published, now, threshold_days) * exploited_factor(exploited) * patched_factor(patched)


def hal_score(
    base: float,
    published: date,
    now: date,
    patched: bool,
    exploited: bool,
    epss: float,
    threshold_days: int = OLDNESS_THRESHOLD_DAYS,
) -> float:
    """EPSS-weighted blend of the score with and without the patch discount."""
    if not 0.0 <= epss <= 1.0:
        raise ValueError(f"epss {epss} outside [0, 1]")
    s = lazarus_score(base, published, now, patched, exploited, threshold_days)
    if not patched:
        return s
    s_wp = lazarus_score(base, published, now, False, exploited, threshold_days)
    # rounding can land a hair outside [s, s_wp]
    return min(max(s * (1.0 - epss) + s_wp * epss, s), s_wp)


def severity_band(score: float) -> str:
    """CVSS qualitative rating; reassessed scores above 10 rate critical."""
    if score < 0:
        raise ValueError(f"score {score} is negative")
    if score == 0.0:
        return "none"
    if score < 4.0:
        return "low"
    if score < 7.0:
        return "medium"
    if score < 9.0:
        return "high"
    return "critical"


def assess(
    cve_id: str,
    base: float,
    provenance: Provenance,
    published: date,
    now: date,
    patched: bool,
    exploited: bool,
    epss: float,
    threshold_days: int = OLDNESS_THRESHOLD_DAYS,
) -> AssessedScore:
    lazarus = lazarus_score(base, published, now, patched, exploited, threshold_days)
    lazarus_wp = lazarus_score(base, published, now, False, exploited, threshold_days)
    return AssessedScore(
        cve_id=cve_id,
        base=base,
        base_provenance=provenance,
        lazarus=lazarus,
        lazarus_wp=lazarus_wp,
        hal=hal_score(base, published, now, patched, exploited, epss, threshold_days),
        factors=Factors(
            oldness=oldness(published, now, threshold_days),
            patched=patched_factor(patched),
            exploited=exploited_factor(exploited),
            epss=epss,
        ),
    )


def assess_all(
    snapshot: CorpusSnapshot,
    predictions: Mapping[str, PredictedScore],
    threshold_days: int = OLDNESS_THRESHOLD_DAYS,
) -> dict[str, AssessedScore]:
    """Assess every snapshot CVE; official scores always win over predictions."""
    missing = [cid for cid in snapshot.received_ids() if cid not in predictions]
    if missing:
        raise MissingAssessmentError("Received CVEs without a predicted score", missing)

    assessed = {}
    for cve_id, record in snapshot.records.items():
        if record.analyzed:
            base, provenance = record.cvss_base, Provenance.OFFICIAL
        else:
            base, provenance = predictions[cve_id].score, Provenance.PREDICTED
        assessed[cve_id] = assess(
            cve_id,
            base,
            provenance,
            record.published_date,
            snapshot.as_of,
            record.patched,
            record.exploited,
            snapshot.epss_for(cve_id),
            threshold_days,
        )
    logger.info("Assessed %d CVEs (%d predicted)", len(assessed), len(snapshot.received_ids()))
    return assessed


def export_assessed_csv(assessed: Mapping[str, AssessedScore], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["cve_id", "base", "provenance", "lazarus", "hal", "epss", "severity"])
    for cve_id in sorted(assessed):
        score = assessed[cve_id]
        writer.writerow([
            cve_id,
            f"{score.base:.2f}",
            score.base_provenance.value,
            f"{score.lazarus:.2f}",
            f"{score.hal:.2f}",
            f"{score.factors.epss:.4f}",
            severity_band(score.hal),
        ])
