"""Signal synthesis for the simulated fleet, with recorded ground truth.

Every generator takes an explicit ``numpy`` Generator so replays with the
same seeds reproduce byte-identical artifacts.
"""
from __future__ import annotations

import math
from typing import Any, Sequence

import numpy as np

from hgdesk.domain.timefmt import fmt_ms
from hgdesk.sim.profiles import SubjectProfile

__all__ = [
    "synth_phq8",
    "synth_accel",
    "synth_pose",
    "phq8_doc",
    "accel_doc",
    "pose_doc",
]

DEFAULT_ACCEL_RATE_HZ = 50.0
DEFAULT_POSE_FPS = 30.0

# sitting/standing keypoint baselines in image pixels (y grows downward)
_SHOULDER_SIT_Y, _SHOULDER_STAND_Y = 400.0, 200.0
_HIP_SIT_Y, _HIP_STAND_Y = 600.0, 450.0


# ----------------------------------------------------------------------
# PHQ-8
# ----------------------------------------------------------------------


def synth_phq8(
    profile: SubjectProfile, rng: np.random.Generator, sigma: float = 0.7
) -> tuple[list[int], int]:
    """Eight answers drawn around the subject's latent level, clipped to 0-3.

    Returns (answers, expected_total); the total is the oracle the server's
    scoring must reproduce exactly.
    """
    level = profile.depression_level
    answers = [
        int(np.clip(np.round(level + (rng.normal(0.0, sigma) if sigma > 0 else 0.0)), 0, 3))
        for _ in range(8)
    ]
    return answers, sum(answers)


def phq8_doc(
    subject_id: str, occurrence_id: str, completed_at_ms: int, answers: Sequence[int]
) -> dict[str, Any]:
    return {
        "schema": "phq8/v1",
        "subject_id": subject_id,
        "occurrence_id": occurrence_id,
        "completed_at": fmt_ms(completed_at_ms),
        "responses": [
            {"question": i + 1, "answer": int(a)} for i, a in enumerate(answers)
        ],
    }


# ----------------------------------------------------------------------
# accelerometer gait
# ----------------------------------------------------------------------


def synth_accel(
    profile: SubjectProfile,
    duration_s: float,
    rng: np.random.Generator,
    sample_rate_hz: float = DEFAULT_ACCEL_RATE_HZ,
    bump_amp: float = 3.0,
    bump_width_s: float = 0.15,
    noise_sd: float = 0.03,
    gravity: float = 9.81,
    edge_taper_steps: int = 2,
) -> tuple[np.ndarray, list[float]]:
    """Gravity baseline plus a raised-cosine impulse per step on the z axis.

    Step k lands at (k + 0.5)/cadence plus per-step jitter, so a trace of
    ``duration_s`` holds exactly floor(duration * cadence) steps. The first
    and last couple of strides fade in/out — gait starts and stops gradually,
    which also keeps band-pass edge transients below the step detector's
    prominence floor. Returns (samples (n, 3), true step times).
    """
    if duration_s < 5.0:
        raise ValueError("synth_accel needs duration_s >= 5 s")
    cadence = profile.gait.cadence_hz
    jitter_sd = profile.gait.step_variability
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz

    n_steps = int(math.floor(duration_s * cadence))
    half_width = bump_width_s / 2
    true_times: list[float] = []
    for k in range(n_steps):
        ti = (k + 0.5) / cadence
        if jitter_sd > 0:
            ti += float(rng.normal(0.0, jitter_sd))
        ti = float(np.clip(ti, half_width, duration_s - half_width))
        true_times.append(ti)
    true_times.sort()

    z = np.full(n, gravity)
    for k, ti in enumerate(true_times):
        scale = 1.0
        if edge_taper_steps:
            if k < edge_taper_steps:
                scale = (k + 1) / (edge_taper_steps + 1)
            if k >= n_steps - edge_taper_steps:
                scale = min(scale, (n_steps - k) / (edge_taper_steps + 1))
        mask = np.abs(t - ti) < half_width
        z[mask] += scale * bump_amp * 0.5 * (1 + np.cos(2 * np.pi * (t[mask] - ti) / bump_width_s))

    samples = np.column_stack([np.zeros(n), np.zeros(n), z])
    if noise_sd > 0:
        samples = samples + rng.normal(0.0, noise_sd, samples.shape)
    return samples, true_times


def accel_doc(
    subject_id: str,
    device_id: str,
    start_ms: int,
    samples: np.ndarray,
    sample_rate_hz: float = DEFAULT_ACCEL_RATE_HZ,
) -> dict[str, Any]:
    return {
        "schema": "accel/v1",
        "subject_id": subject_id,
        "device_id": device_id,
        "sample_rate_hz": float(sample_rate_hz),
        "start_time": fmt_ms(start_ms),
        "units": "m/s2",
        "samples": [[float(v) for v in row] for row in np.asarray(samples)],
    }


# ----------------------------------------------------------------------
# sit-to-stand pose sequences
# ----------------------------------------------------------------------


def _smoothstep(u: float) -> float:
    return 3.0 * u * u - 2.0 * u * u * u


def synth_pose(
    profile: SubjectProfile,
    cycles: int,
    plateaus: Sequence[tuple[int, float, float]] | None,
    rng: np.random.Generator,
    fps: float = DEFAULT_POSE_FPS,
    rise_s: float = 1.5,
    noise_px: float = 0.5,
) -> tuple[list[tuple[float, float, float]], dict[str, Any]]:
    """Smoothstep sit->stand->sit cycles for shoulder/hip image-y traces.

    ``plateaus`` lists (cycle_index, progress_fraction, duration_s) stalls to
    inject mid-rise; ``None`` draws them from the profile's plateau_rate.
    Auto-drawn stalls land at 40-60% progress — the elevation there stays
    strictly between the detector's sitting/standing bands, so every drawn
    plateau is a countable hesitation — and last 0.3-0.6 s. Returns the
    (t, shoulder_y, hip_y) rows plus a truth record of every rise, fall,
    and plateau interval.
    """
    if cycles < 1:
        raise ValueError("synth_pose needs cycles >= 1")
    if plateaus is None:
        plateaus = [
            (c, float(rng.uniform(0.4, 0.6)), float(rng.uniform(0.3, 0.6)))
            for c in range(cycles)
            if rng.random() < profile.sts.plateau_rate
        ]
    by_cycle: dict[int, tuple[float, float]] = {}
    for cycle_index, frac, dur in plateaus:
        if not 0 <= cycle_index < cycles:
            raise ValueError(f"plateau cycle {cycle_index} outside 0..{cycles - 1}")
        if not 0.1 <= frac <= 0.9:
            raise ValueError("plateau progress fraction outside [0.1, 0.9]")
        if cycle_index in by_cycle:
            raise ValueError("at most one plateau per cycle")
        by_cycle[cycle_index] = (frac, dur)

    hold_s = max(1.0, (profile.sts.cycle_period_s - 2.0 * rise_s) / 2.0)
    dt = 1.0 / fps
    rows: list[tuple[float, float, float]] = []
    truth: dict[str, Any] = {"rises": [], "falls": [], "plateaus": []}
    clock = {"t": 0.0}

    def emit(progress, dur_s: float) -> tuple[float, float]:
        start = clock["t"]
        n_frames = max(1, int(round(dur_s * fps)))
        for i in range(n_frames):
            u = i / max(n_frames - 1, 1)
            h = _smoothstep(progress(u))
            sh = _SHOULDER_SIT_Y + (_SHOULDER_STAND_Y - _SHOULDER_SIT_Y) * h
            hip = _HIP_SIT_Y + (_HIP_STAND_Y - _HIP_SIT_Y) * h
            if noise_px > 0:
                sh += float(rng.normal(0.0, noise_px))
                hip += float(rng.normal(0.0, noise_px))
            rows.append((clock["t"], sh, hip))
            clock["t"] += dt
        return start, clock["t"] - dt

    emit(lambda u: 0.0, hold_s)  # settle seated
    for c in range(cycles):
        rise_start = clock["t"]
        if c in by_cycle:
            frac, dur = by_cycle[c]
            emit(lambda u, f=frac: u * f, rise_s * frac)
            p_start, p_end = emit(lambda u, f=frac: f, dur)
            truth["plateaus"].append(
                {"cycle": c, "t_start": p_start, "t_end": p_end, "duration_s": dur}
            )
            emit(lambda u, f=frac: f + u * (1.0 - f), rise_s * (1.0 - frac))
        else:
            emit(lambda u: u, rise_s)
        truth["rises"].append({"cycle": c, "t_start": rise_start, "t_end": clock["t"] - dt})
        emit(lambda u: 1.0, hold_s)
        fall_start = clock["t"]
        emit(lambda u: 1.0 - u, rise_s)
        truth["falls"].append({"cycle": c, "t_start": fall_start, "t_end": clock["t"] - dt})
        emit(lambda u: 0.0, hold_s)
    return rows, truth


def pose_doc(
    rows: Sequence[tuple[float, float, float]], fps: float = DEFAULT_POSE_FPS
) -> dict[str, Any]:
    return {
        "schema": "pose2d/v1",
        "fps": float(fps),
        "frames": [
            {
                "t": float(t),
                "keypoints": {
                    "mid_shoulder": [320.0, float(sh), 1.0],
                    "mid_hip": [320.0, float(hip), 1.0],
                },
            }
            for t, sh, hip in rows
        ],
    }
