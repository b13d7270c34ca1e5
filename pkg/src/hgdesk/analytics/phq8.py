"""PHQ-8 depression questionnaire scoring.

Eight items, each answered 0..3; the total (0..24) maps onto five severity
bands: 0-4 none, 5-9 mild, 10-14 moderate, 15-19 moderately severe,
20-24 severe.
"""
from __future__ import annotations

from typing import Any, Final, Iterable, Mapping, Sequence

from hgdesk.errors import AnalyticError
from hgdesk.store.payloads import validate_phq8_doc

__all__ = ["SEVERITY_BANDS", "severity_category", "score_phq8", "analyze", "phq8_series"]

RESULT_SCHEMA: Final[str] = "phq8.result/v1"

# (lower, upper, category) with inclusive bounds.
SEVERITY_BANDS: Final[tuple[tuple[int, int, str], ...]] = (
    (0, 4, "none"),
    (5, 9, "mild"),
    (10, 14, "moderate"),
    (15, 19, "moderately_severe"),
    (20, 24, "severe"),
)


def severity_category(total: int) -> str:
    for lower, upper, category in SEVERITY_BANDS:
        if lower <= total <= upper:
            return category
    raise AnalyticError(f"total score {total} outside 0..24")


def score_phq8(answers: Sequence[int]) -> tuple[int, str]:
    """Total + severity category for eight item answers (each 0..3)."""
    if len(answers) != 8:
        raise AnalyticError(f"expected 8 answers, got {len(answers)}")
    for i, a in enumerate(answers):
        if not isinstance(a, int) or isinstance(a, bool) or not 0 <= a <= 3:
            raise AnalyticError(f"answer {i + 1} must be an integer in 0..3, got {a!r}")
    total = sum(answers)
    return total, severity_category(total)


def analyze(payload_doc: Mapping[str, Any]) -> dict[str, Any]:
    """Result body for one validated phq8/v1 upload."""
    doc = validate_phq8_doc(payload_doc)
    per_item = [item["answer"] for item in doc["responses"]]
    total, category = score_phq8(per_item)
    return {
        "schema": RESULT_SCHEMA,
        "total_score": total,
        "category": category,
        "per_item": per_item,
    }


def phq8_series(entries: Iterable[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Longitudinal view: (date, total, category) sorted by completion time.

    ``entries`` carry ``completed_at`` (ISO timestamp) and ``total_score``.
    Duplicate same-day completions are all retained.
    """
    rows = []
    for e in entries:
        completed = e["completed_at"]
        total = int(e["total_score"])
        rows.append(
            {
                "completed_at": completed,
                "date": completed[:10],
                "total": total,
                "category": severity_category(total),
            }
        )
    rows.sort(key=lambda r: r["completed_at"])
    return rows
