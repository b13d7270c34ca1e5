"""Windowed scalar aggregation over per-subject results."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

from hgdesk.errors import AnalyticError

__all__ = ["ScalarPoint", "aggregate"]


@dataclass(frozen=True)
class ScalarPoint:
    subject_id: str
    test_id: str
    day: str
    value: float


def aggregate(points: Sequence[ScalarPoint]) -> dict[str, Any]:
    """count/mean/min/max over one subject's scalars for one test.

    Empty input yields count 0 with null statistics; mixing subjects or
    tests is a caller bug and rejected with MIXED_INPUT.
    """
    if not points:
        return {"count": 0, "mean": None, "min": None, "max": None}
    keys = {(p.subject_id, p.test_id) for p in points}
    if len(keys) > 1:
        err = AnalyticError("aggregate: points span multiple subjects or tests")
        err.code = "MIXED_INPUT"
        raise err
    values = [float(p.value) for p in points]
    return {
        "count": len(values),
        "mean": math.fsum(values) / len(values),
        "min": min(values),
        "max": max(values),
    }
