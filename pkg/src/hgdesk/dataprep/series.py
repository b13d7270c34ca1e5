"""Timestamped-series preparation: gap imputation and clock alignment.

Timestamps are integer epoch milliseconds; all arithmetic on them is exact
integer math so synchronization shifts are reversible bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from hgdesk.errors import AnalyticError

__all__ = ["Sample", "ImputedSeries", "impute_gaps", "interpolate_at", "synchronize"]

POLICIES = ("linear", "hold", "drop")

# A gap is any inter-sample spacing beyond this multiple of the nominal period.
GAP_FACTOR = 1.5
DEFAULT_MAX_GAP_S = 5.0


@dataclass(frozen=True)
class Sample:
    t_ms: int
    value: float
    imputed: bool = False


@dataclass(frozen=True)
class ImputedSeries:
    """Imputation output: flagged samples plus contiguous segment spans.

    ``segments`` are (start, end) half-open index ranges into ``samples``;
    more than one segment means an unfillable gap split the series.
    """

    samples: tuple[Sample, ...]
    segments: tuple[tuple[int, int], ...]

    @property
    def imputed_count(self) -> int:
        return sum(1 for s in self.samples if s.imputed)


def _empty(detail: str) -> AnalyticError:
    err = AnalyticError(detail)
    err.code = "EMPTY_INPUT"
    return err


def impute_gaps(
    samples: Sequence[tuple[int, float]],
    sample_rate_hz: float,
    policy: str = "linear",
    max_gap_s: float = DEFAULT_MAX_GAP_S,
) -> ImputedSeries:
    """Fill missing samples relative to the nominal rate.

    Gaps up to ``max_gap_s`` are filled on the nominal grid per ``policy``
    (linear interpolation or hold-last); ``drop`` leaves them unfilled.
    Longer gaps are never filled and split the series into segments.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if sample_rate_hz <= 0:
        raise ValueError("sample_rate_hz must be positive")
    if len(samples) == 0:
        raise _empty("impute_gaps: empty series")
    nominal_ms = 1000.0 / sample_rate_hz
    gap_ms = GAP_FACTOR * nominal_ms
    max_gap_ms = max_gap_s * 1000.0

    out: list[Sample] = []
    segment_starts = [0]
    prev_t, prev_v = None, None
    for t, v in samples:
        t = int(t)
        v = float(v)
        if prev_t is not None:
            dt = t - prev_t
            if dt <= 0:
                raise ValueError("timestamps must be strictly increasing")
            if dt > gap_ms:
                if dt > max_gap_ms or policy == "drop":
                    # unfillable: start a new segment at the incoming sample
                    segment_starts.append(len(out))
                else:
                    missing = int(round(dt / nominal_ms)) - 1
                    for k in range(1, missing + 1):
                        ft = prev_t + int(round(k * nominal_ms))
                        if ft >= t:
                            break
                        if policy == "linear":
                            frac = (ft - prev_t) / dt
                            fv = prev_v + frac * (v - prev_v)
                        else:  # hold
                            fv = prev_v
                        out.append(Sample(t_ms=ft, value=fv, imputed=True))
        out.append(Sample(t_ms=t, value=v, imputed=False))
        prev_t, prev_v = t, v

    bounds = segment_starts + [len(out)]
    segments = tuple(
        (bounds[i], bounds[i + 1]) for i in range(len(segment_starts)) if bounds[i] < bounds[i + 1]
    )
    return ImputedSeries(samples=tuple(out), segments=segments)


def interpolate_at(
    query_t: Sequence[float], known_t: Sequence[float], known_v: Sequence[float]
) -> np.ndarray:
    """Linear interpolation at ``query_t`` with edge-hold extrapolation.

    This is the "linear policy" applied at arbitrary query times; the pose
    analytics use it to patch low-confidence frames.
    """
    if len(known_t) == 0:
        raise _empty("interpolate_at: no known samples")
    return np.interp(np.asarray(query_t, dtype=float), known_t, known_v)


def synchronize(
    streams: Iterable[tuple[Sequence[tuple[int, float]], int]],
) -> list[list[tuple[int, float]]]:
    """Shift each stream's timestamps by minus its device clock offset.

    ``streams`` yields (samples, clock_offset_ms) pairs where the offset is
    how far the device clock runs ahead of server time.  Integer math only.
    """
    aligned: list[list[tuple[int, float]]] = []
    for samples, offset in streams:
        offset = int(offset)
        aligned.append([(int(t) - offset, v) for t, v in samples])
    return aligned
