"""Sit-to-stand mobility analysis over 2-D pose keypoint series.

From per-frame mid_shoulder / mid_hip positions this derives a normalized
torso-elevation signal (0 = sitting baseline, 1 = standing baseline),
detects sit<->stand transitions with hysteresis thresholding, and counts
hesitations (stalls or reversals) inside each transition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Final, Mapping, Sequence

import numpy as np

from hgdesk.dataprep.series import interpolate_at
from hgdesk.errors import AnalyticError
from hgdesk.store.payloads import validate_pose_doc

__all__ = [
    "StsParams",
    "TorsoSignal",
    "Transition",
    "torso_signal",
    "detect_transitions",
    "count_hesitations",
    "analyze_pose",
    "downsample_graph",
    "pose_doc_from_rows",
]

RESULT_SCHEMA: Final[str] = "sts.result/v1"
REQUIRED_KEYPOINTS: Final[tuple[str, str]] = ("mid_shoulder", "mid_hip")


@dataclass(frozen=True)
class StsParams:
    """Tuning for the transition detector; defaults are the contract values."""

    min_confidence: float = 0.3
    min_coverage: float = 0.8  # fraction of frames with both keypoints usable
    smooth_secs: float = 0.25  # moving-average window, ceil(smooth_secs * fps) frames
    sit_band: float = 0.3  # sitting when height < sit_band
    stand_band: float = 0.7  # standing when height > stand_band
    min_transition_s: float = 0.2
    max_transition_s: float = 10.0
    stall_frac: float = 0.1  # stall = velocity below this fraction of peak
    min_stall_s: float = 0.2
    graph_points: int = 200


@dataclass(frozen=True)
class TorsoSignal:
    """Normalized torso elevation per frame (the plotted motion graph)."""

    t: tuple[float, ...]
    torso_height: tuple[float, ...]
    fps: float
    smooth_window_frames: int
    smoothed: bool = True

    @property
    def torso_phase(self) -> tuple[float, ...]:
        """The elevation series doubles as the reported phase output."""
        return self.torso_height

    @property
    def smooth_window_secs(self) -> float:
        return self.smooth_window_frames / self.fps


@dataclass(frozen=True)
class Transition:
    kind: str  # "sit_to_stand" | "stand_to_sit"
    t_start: float
    t_end: float
    start_index: int
    end_index: int
    hesitation_count: int = 0

    @property
    def duration_s(self) -> float:
        return self.t_end - self.t_start

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "duration_s": self.duration_s,
            "hesitation_count": self.hesitation_count,
        }


def _analytic(code: str, detail: str) -> AnalyticError:
    return AnalyticError(detail, code=code)


def _keypoint_series(frames: Sequence[Mapping[str, Any]], name: str, min_conf: float) -> np.ndarray:
    """Per-frame y for one keypoint, low-confidence frames linearly imputed."""
    t = np.array([float(f["t"]) for f in frames])
    y = np.full(len(frames), np.nan)
    for i, frame in enumerate(frames):
        kp = frame["keypoints"].get(name)
        if kp is not None and float(kp[2]) >= min_conf:
            y[i] = float(kp[1])
    good = ~np.isnan(y)
    if not good.any():
        raise _analytic("INSUFFICIENT_POSE", f"keypoint {name!r} never confident")
    if good.all():
        return y
    return interpolate_at(t, t[good], y[good])


def torso_signal(pose_doc: Mapping[str, Any], params: StsParams = StsParams()) -> TorsoSignal:
    """Normalized, smoothed torso elevation from a pose2d/v1 document.

    Raw height per frame is -(y_mid_shoulder + y_mid_hip)/2 (image y grows
    downward); a centered moving average of ceil(smooth_secs * fps) frames
    smooths it, and the 5th/95th percentiles of the smoothed series map to
    0 and 1.
    """
    doc = validate_pose_doc(pose_doc)
    frames = doc["frames"]
    fps = float(doc["fps"])

    usable = 0
    for frame in frames:
        kps = frame["keypoints"]
        if all(
            name in kps and float(kps[name][2]) >= params.min_confidence
            for name in REQUIRED_KEYPOINTS
        ):
            usable += 1
    coverage = usable / len(frames)
    if coverage < params.min_coverage:
        raise _analytic(
            "INSUFFICIENT_POSE",
            f"only {coverage:.0%} of frames have confident mid_shoulder and mid_hip "
            f"(need {params.min_coverage:.0%})",
        )

    t = np.array([float(f["t"]) for f in frames])
    shoulder_y = _keypoint_series(frames, "mid_shoulder", params.min_confidence)
    hip_y = _keypoint_series(frames, "mid_hip", params.min_confidence)
    raw = -(shoulder_y + hip_y) / 2.0

    window = max(1, math.ceil(params.smooth_secs * fps))
    smoothed = _moving_average(raw, window)

    p5, p95 = np.percentile(smoothed, [5, 95])
    span = p95 - p5
    if span < 1e-6:
        height = np.full_like(smoothed, 0.5)
    else:
        height = np.clip((smoothed - p5) / span, 0.0, 1.0)

    return TorsoSignal(
        t=tuple(float(x) for x in t),
        torso_height=tuple(float(x) for x in height),
        fps=fps,
        smooth_window_frames=window,
    )


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average, truncated at the edges."""
    if window <= 1:
        return values.astype(float)
    half_lo = (window - 1) // 2
    half_hi = window // 2
    csum = np.concatenate(([0.0], np.cumsum(values)))
    n = len(values)
    idx = np.arange(n)
    lo = np.maximum(idx - half_lo, 0)
    hi = np.minimum(idx + half_hi, n - 1)
    return (csum[hi + 1] - csum[lo]) / (hi - lo + 1)


def detect_transitions(signal: TorsoSignal, params: StsParams = StsParams()) -> list[Transition]:
    """Hysteresis transition detection on the normalized elevation.

    Sitting below ``sit_band``, standing above ``stand_band``; a transition
    spans from the last sample inside the departed band to the first sample
    inside the entered band. Implausibly short or long spans are dropped.
    """
    h = np.asarray(signal.torso_height)
    t = np.asarray(signal.t)
    state: str | None = None  # "sit" | "stand", once a band is entered
    last_in_band = 0
    out: list[Transition] = []
    for i in range(len(h)):
        if h[i] < params.sit_band:
            if state == "stand":
                _append_transition(out, "stand_to_sit", last_in_band, i, t, params)
            state = "sit"
            last_in_band = i
        elif h[i] > params.stand_band:
            if state == "sit":
                _append_transition(out, "sit_to_stand", last_in_band, i, t, params)
            state = "stand"
            last_in_band = i
    return out


def _append_transition(
    out: list[Transition],
    kind: str,
    start_index: int,
    end_index: int,
    t: np.ndarray,
    params: StsParams,
) -> None:
    duration = float(t[end_index] - t[start_index])
    if params.min_transition_s <= duration <= params.max_transition_s:
        out.append(
            Transition(
                kind=kind,
                t_start=float(t[start_index]),
                t_end=float(t[end_index]),
                start_index=start_index,
                end_index=end_index,
            )
        )


def count_hesitations(
    signal: TorsoSignal, transition: Transition, params: StsParams = StsParams()
) -> int:
    """Stalls or reversals strictly inside one transition.

    A hesitation is a maximal run of samples whose velocity toward the
    target falls below ``stall_frac`` of the transition's peak velocity.
    Smoothing blurs a flat spot to roughly its true length minus 0.8 of the
    averaging window, so that allowance is credited back before comparing
    against ``min_stall_s``; plateaus much shorter than the window stay
    undetectable.
    """
    h = np.asarray(signal.torso_height)
    t = np.asarray(signal.t)
    lo, hi = transition.start_index, transition.end_index
    if hi - lo < 3:
        return 0
    velocity = np.gradient(h[lo : hi + 1], t[lo : hi + 1])
    if transition.kind == "stand_to_sit":
        velocity = -velocity
    peak = float(velocity.max())
    if peak <= 0.0:
        return 0
    threshold = params.stall_frac * peak
    blur_credit = 0.8 * signal.smooth_window_secs

    count = 0
    run_start: int | None = None
    # interior samples only: runs touching either endpoint are not counted
    for j in range(1, len(velocity) - 1):
        if velocity[j] < threshold:
            if run_start is None:
                run_start = j
        elif run_start is not None:
            run_len = float(t[lo + j - 1] - t[lo + run_start])
            if run_len + blur_credit >= params.min_stall_s:
                count += 1
            run_start = None
    if run_start is not None:
        run_len = float(t[lo + len(velocity) - 2] - t[lo + run_start])
        if run_len + blur_credit >= params.min_stall_s:
            count += 1
    return count


def downsample_graph(signal: TorsoSignal, max_points: int = 200) -> dict[str, list[float]]:
    """Stride-sampled rendering payload; crossings stay within one stride."""
    n = len(signal.t)
    stride = max(1, math.ceil(n / max_points))
    idx = list(range(0, n, stride))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    return {
        "t": [signal.t[i] for i in idx],
        "phase": [signal.torso_height[i] for i in idx],
    }


def analyze_pose(pose_doc: Mapping[str, Any], params: StsParams = StsParams()) -> dict[str, Any]:
    """Result body for one pose2d/v1 upload."""
    signal = torso_signal(pose_doc, params)
    transitions = [
        replace(tr, hesitation_count=count_hesitations(signal, tr, params))
        for tr in detect_transitions(signal, params)
    ]
    rises = sum(1 for tr in transitions if tr.kind == "sit_to_stand")
    falls = sum(1 for tr in transitions if tr.kind == "stand_to_sit")
    return {
        "schema": RESULT_SCHEMA,
        "transitions": [tr.to_doc() for tr in transitions],
        "total_cycles": min(rises, falls),
        "hesitation_total": sum(tr.hesitation_count for tr in transitions),
        "torso_graph": downsample_graph(signal, params.graph_points),
    }


def pose_doc_from_rows(
    rows: Sequence[tuple[float, float, float]], fps: float
) -> dict[str, Any]:
    """Build a pose2d/v1 document from (t, shoulder_y, hip_y) rows.

    Fixture-authoring helper behind the CLI converter; confidence is 1.0
    and x coordinates are zeroed since only vertical motion matters here.
    """
    frames = [
        {
            "t": float(t),
            "keypoints": {
                "mid_shoulder": [0.0, float(shoulder_y), 1.0],
                "mid_hip": [0.0, float(hip_y), 1.0],
            },
        }
        for t, shoulder_y, hip_y in rows
    ]
    return {"schema": "pose2d/v1", "fps": float(fps), "frames": frames}
