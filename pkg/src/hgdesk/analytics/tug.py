"""Wrist-accelerometer gait analysis and TUG-time prediction.

Pipeline: magnitude -> gravity removal -> 0.5-3 Hz band-pass (2nd-order
Butterworth run forward-backward = 4th-order zero-phase) -> prominence-based
peak picking -> episode grouping -> step-duration statistics -> predicted
timed-up-and-go seconds with clinical risk flags.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Final, Mapping, Sequence

import numpy as np
from scipy.signal import butter, filtfilt, find_peaks

from hgdesk.analytics.forest import ForestParams, fit_forest, predict_forest
from hgdesk.dataprep.aggregate import ScalarPoint, aggregate
from hgdesk.errors import AnalyticError
from hgdesk.store.payloads import validate_accel_doc

__all__ = [
    "StepParams",
    "WalkingEpisode",
    "FEATURE_NAMES",
    "RISK_THRESHOLDS",
    "detect_steps",
    "extract_features",
    "risk_flags",
    "predict_tug",
    "load_model",
    "save_model",
    "default_linear_model",
    "train_forest_model",
    "analyze_trace",
    "daily_summary",
]

RESULT_SCHEMA: Final[str] = "tug.result/v1"


@dataclass(frozen=True)
class StepParams:
    """Step-detection tuning; defaults are the contract values."""

    gravity_mps2: float = 9.81
    band_low_hz: float = 0.5
    band_high_hz: float = 3.0
    min_prominence: float = 0.3  # m/s^2 after filtering
    min_step_gap_s: float = 0.3
    episode_gap_s: float = 2.0  # a gap >= this ends a walking bout
    min_steps: int = 10  # shorter bouts are treated as noise
    min_rate_hz: float = 20.0
    min_duration_s: float = 1.0


@dataclass(frozen=True)
class WalkingEpisode:
    start_index: int  # sample index of the first step peak
    end_index: int  # sample index of the last step peak
    step_times_s: tuple[float, ...]

    @property
    def step_count(self) -> int:
        return len(self.step_times_s)

    def step_durations(self) -> np.ndarray:
        return np.diff(np.asarray(self.step_times_s))


# Ten statistics over step durations ("sd") and the same ten over their
# successive differences ("diff"): 20 features total.
_STATS = ("mean", "std", "min", "max", "median", "p5", "p25", "p75", "p95", "iqr")
FEATURE_NAMES: Final[tuple[str, ...]] = tuple(
    f"{stat}_{series}" for series in ("sd", "diff") for stat in _STATS
)

# Inclusive thresholds (seconds) for elevated fall risk.
RISK_THRESHOLDS: Final[tuple[tuple[str, float], ...]] = (
    ("pd_elevated", 11.5),
    ("general_elevated", 13.5),
    ("stroke_elevated", 14.0),
)


def _analytic(code: str, detail: str) -> AnalyticError:
    return AnalyticError(detail, code=code)


def detect_steps(
    samples: Sequence[Sequence[float]] | np.ndarray,
    sample_rate_hz: float,
    params: StepParams = StepParams(),
) -> list[WalkingEpisode]:
    """Find walking bouts in a raw (n, 3) accelerometer trace."""
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise _analytic("BAD_TRACE", "samples must be an (n, 3) array")
    if sample_rate_hz < params.min_rate_hz:
        raise _analytic(
            "UNSUPPORTED_RATE",
            f"sample rate {sample_rate_hz} Hz below minimum {params.min_rate_hz} Hz",
        )
    n = arr.shape[0]
    if n / sample_rate_hz < params.min_duration_s:
        raise _analytic("EMPTY_INPUT", "trace shorter than one second")

    magnitude = np.sqrt((arr * arr).sum(axis=1)) - params.gravity_mps2
    b, a = butter(
        2,
        [params.band_low_hz, params.band_high_hz],
        btype="bandpass",
        fs=sample_rate_hz,
    )
    filtered = filtfilt(b, a, magnitude)

    distance = max(1, int(round(params.min_step_gap_s * sample_rate_hz)))
    peaks, _ = find_peaks(filtered, prominence=params.min_prominence, distance=distance)
    if len(peaks) == 0:
        return []

    peak_times = peaks / sample_rate_hz
    episodes: list[WalkingEpisode] = []
    group_start = 0
    for i in range(1, len(peaks) + 1):
        if i == len(peaks) or peak_times[i] - peak_times[i - 1] >= params.episode_gap_s:
            idx = peaks[group_start:i]
            if len(idx) >= params.min_steps:
                episodes.append(
                    WalkingEpisode(
                        start_index=int(idx[0]),
                        end_index=int(idx[-1]),
                        step_times_s=tuple(float(t) for t in idx / sample_rate_hz),
                    )
                )
            group_start = i
    return episodes


def extract_features(step_durations: Sequence[float] | np.ndarray) -> dict[str, float]:
    """The 20 statistical gait features for one episode's step durations.

    Percentiles use linear interpolation between closest ranks; std is the
    population standard deviation.
    """
    durations = np.asarray(step_durations, dtype=float)
    if durations.size < 2:
        raise _analytic("EMPTY_INPUT", "need at least 2 step durations")
    out: dict[str, float] = {}
    for series_name, series in (("sd", durations), ("diff", np.diff(durations))):
        p5, p25, median, p75, p95 = np.percentile(series, [5, 25, 50, 75, 95])
        out[f"mean_{series_name}"] = float(series.mean())
        out[f"std_{series_name}"] = float(series.std(ddof=0))
        out[f"min_{series_name}"] = float(series.min())
        out[f"max_{series_name}"] = float(series.max())
        out[f"median_{series_name}"] = float(median)
        out[f"p5_{series_name}"] = float(p5)
        out[f"p25_{series_name}"] = float(p25)
        out[f"p75_{series_name}"] = float(p75)
        out[f"p95_{series_name}"] = float(p95)
        out[f"iqr_{series_name}"] = float(p75 - p25)
    return out


def risk_flags(tug_seconds: float) -> list[str]:
    """Inclusive-threshold fall-risk flags, ordered by threshold."""
    return [flag for flag, threshold in RISK_THRESHOLDS if tug_seconds >= threshold]


# ----------------------------------------------------------------------
# predictor models
# ----------------------------------------------------------------------


def _check_model(model: Mapping[str, Any]) -> Mapping[str, Any]:
    for key in ("model_id", "type", "parameters"):
        if key not in model:
            raise _analytic("BAD_MODEL", f"model file missing {key!r}")
    if model["type"] not in ("linear", "forest"):
        raise _analytic("BAD_MODEL", f"unknown model type {model['type']!r}")
    return model


def load_model(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise _analytic("MODEL_NOT_FOUND", f"model file {p} does not exist")
    with p.open() as fh:
        return dict(_check_model(json.load(fh)))


def save_model(model: Mapping[str, Any], path: str | Path) -> None:
    _check_model(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(model, indent=2, sort_keys=True) + "\n")


def default_linear_model() -> dict[str, Any]:
    """The shipped linear predictor (resource file)."""
    text = resources.files("hgdesk").joinpath("resources/tug_linear_default.json").read_text()
    return dict(_check_model(json.loads(text)))


def predict_tug(features: Mapping[str, float], model: Mapping[str, Any]) -> float:
    """Predicted TUG seconds from one episode's features."""
    _check_model(model)
    params = model["parameters"]
    if model["type"] == "linear":
        total = float(params.get("intercept", 0.0))
        for name, coef in params.get("coefficients", {}).items():
            if name not in features:
                raise _analytic("BAD_MODEL", f"model references unknown feature {name!r}")
            total += float(coef) * float(features[name])
        return total
    names = params["feature_names"]
    x = np.array([float(features[name]) for name in names])
    return predict_forest(params["forest"], x)


def train_forest_model(
    feature_rows: Sequence[Mapping[str, float]],
    labels: Sequence[float],
    seed: int,
    model_id: str = "tug-forest",
    forest_params: ForestParams = ForestParams(),
) -> dict[str, Any]:
    """Fit the ensemble on (features, TUG seconds) pairs; fully seeded."""
    names = list(FEATURE_NAMES)
    X = np.array([[float(row[name]) for name in names] for row in feature_rows])
    y = np.asarray(labels, dtype=float)
    forest_doc = fit_forest(X, y, seed=seed, params=forest_params)
    return {
        "model_id": model_id,
        "type": "forest",
        "seed": seed,
        "parameters": {"feature_names": names, "forest": forest_doc},
    }


# ----------------------------------------------------------------------
# worker entry points
# ----------------------------------------------------------------------


def analyze_trace(
    accel_doc: Mapping[str, Any],
    model: Mapping[str, Any],
    params: StepParams = StepParams(),
) -> dict[str, Any]:
    """Result body for one accel/v1 upload.

    ``daily_mean`` here covers this trace's episodes; when a worker
    processes a whole (study, test, day) dataset it widens the mean to all
    of the subject's uploads for the day.
    """
    doc = validate_accel_doc(accel_doc)
    rate = float(doc["sample_rate_hz"])
    min_steps = params.min_steps
    episodes = detect_steps(doc["samples"], rate, params)
    predictions = []
    for i, episode in enumerate(episodes):
        if episode.step_count < min_steps:  # pragma: no cover - filtered upstream
            continue
        features = extract_features(episode.step_durations())
        tug_seconds = predict_tug(features, model)
        predictions.append(
            {
                "episode": i,
                "start_s": episode.start_index / rate,
                "end_s": episode.end_index / rate,
                "step_count": episode.step_count,
                "tug_seconds": tug_seconds,
                "risk_flags": risk_flags(tug_seconds),
                "features": features,
            }
        )
    values = [p["tug_seconds"] for p in predictions]
    return {
        "schema": RESULT_SCHEMA,
        "predictions": predictions,
        "daily_mean": (sum(values) / len(values)) if values else None,
    }


def daily_summary(
    subject_id: str, test_id: str, day: str, tug_values: Sequence[float]
) -> dict[str, Any]:
    """Aggregate one subject's TUG predictions for one day."""
    points = [ScalarPoint(subject_id, test_id, day, v) for v in tug_values]
    return aggregate(points)
