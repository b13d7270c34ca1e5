"""Independent reference implementations used to freeze expected test values.

Everything here is deliberately written from scratch with plain Python
(math/hashlib only — no numpy, no imports from the package under test) so
agreement between package and oracle is meaningful.
"""
from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

# ----------------------------------------------------------------------
# questionnaire scoring
# ----------------------------------------------------------------------

CATEGORY_BANDS: Tuple[Tuple[int, int, str], ...] = (
    (0, 4, "none"),
    (5, 9, "mild"),
    (10, 14, "moderate"),
    (15, 19, "moderately_severe"),
    (20, 24, "severe"),
)


def brute_force_phq8(answers: Sequence[int]) -> Tuple[int, str]:
    """Total by plain loop; category by explicit band table."""
    if len(answers) != 8:
        raise ValueError("need exactly 8 answers")
    total = 0
    for a in answers:
        if a not in (0, 1, 2, 3):
            raise ValueError(f"answer {a!r} out of range")
        total += a
    for lo, hi, name in CATEGORY_BANDS:
        if lo <= total <= hi:
            return total, name
    raise AssertionError("unreachable: total outside 0..24")


def all_phq8_vectors():
    """All 4^8 = 65,536 answer vectors, lexicographic."""
    for code in range(4**8):
        answers = []
        v = code
        for _ in range(8):
            answers.append(v % 4)
            v //= 4
        yield tuple(reversed(answers))


# ----------------------------------------------------------------------
# reference statistics (percentile = linear interpolation between
# closest ranks, inclusive; std = population standard deviation)
# ----------------------------------------------------------------------


def reference_percentile(values: Sequence[float], q: float) -> float:
    """Inclusive linear-interpolation percentile, hand-rolled."""
    if not values:
        raise ValueError("empty series")
    ordered = sorted(float(v) for v in values)
    n = len(ordered)
    if n == 1:
        return ordered[0]
    rank = (q / 100.0) * (n - 1)
    lo = math.floor(rank)
    hi = math.ceil(rank)
    if lo == hi:
        return ordered[int(rank)]
    frac = rank - lo
    return ordered[lo] * (1.0 - frac) + ordered[hi] * frac


def reference_stats(values: Sequence[float]) -> Dict[str, float]:
    """The ten per-series statistics, computed independently."""
    if not values:
        raise ValueError("empty series")
    xs = [float(v) for v in values]
    n = len(xs)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / n  # population variance
    p25 = reference_percentile(xs, 25)
    p75 = reference_percentile(xs, 75)
    return {
        "mean": mean,
        "std": math.sqrt(var),
        "min": min(xs),
        "max": max(xs),
        "median": reference_percentile(xs, 50),
        "p5": reference_percentile(xs, 5),
        "p25": p25,
        "p75": p75,
        "p95": reference_percentile(xs, 95),
        "iqr": p75 - p25,
    }


def reference_features(step_durations: Sequence[float]) -> Dict[str, float]:
    """The 20 gait features: stats of durations and of their differences."""
    durations = [float(v) for v in step_durations]
    if len(durations) < 2:
        raise ValueError("need at least 2 durations")
    diffs = [b - a for a, b in zip(durations, durations[1:])]
    out: Dict[str, float] = {}
    for suffix, series in (("sd", durations), ("diff", diffs)):
        for stat, value in reference_stats(series).items():
            out[f"{stat}_{suffix}"] = value
    return out


# ----------------------------------------------------------------------
# reference gap imputation (linear / hold on the nominal grid)
# ----------------------------------------------------------------------


def reference_impute(
    samples: Sequence[Tuple[int, float]],
    sample_rate_hz: float,
    policy: str = "linear",
    max_gap_s: float = 5.0,
) -> Tuple[List[Tuple[int, float, bool]], List[List[int]]]:
    """Fill gaps on the nominal grid; gaps beyond max_gap split segments.

    Returns (rows, segments) where rows are (t_ms, value, imputed) and
    segments list the row indices belonging to each contiguous run.
    """
    period = 1000.0 / sample_rate_hz
    rows: List[Tuple[int, float, bool]] = []
    segments: List[List[int]] = [[]]
    prev = None
    for t, v in samples:
        t, v = int(t), float(v)
        if prev is not None:
            dt = t - prev[0]
            if dt > 1.5 * period:
                if dt > max_gap_s * 1000.0 or policy == "drop":
                    segments.append([])
                else:
                    k = 1
                    while True:
                        ft = prev[0] + int(round(k * period))
                        if ft >= t:
                            break
                        if policy == "linear":
                            fv = prev[1] + (ft - prev[0]) / dt * (v - prev[1])
                        else:
                            fv = prev[1]
                        segments[-1].append(len(rows))
                        rows.append((ft, fv, True))
                        k += 1
        segments[-1].append(len(rows))
        rows.append((t, v, False))
        prev = (t, v)
    return rows, [seg for seg in segments if seg]
