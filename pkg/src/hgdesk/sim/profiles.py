"""Deterministic subject profiles and the simulator's ground-truth log."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "GaitProfile",
    "StsProfile",
    "SubjectProfile",
    "TruthEntry",
    "GroundTruthLog",
    "make_profiles",
]


@dataclass(frozen=True)
class GaitProfile:
    cadence_hz: float = 1.8
    step_variability: float = 0.02  # per-step timing jitter, seconds (sd)
    preferred_walk_secs: float = 45.0

    def __post_init__(self) -> None:
        if not 0.5 <= self.cadence_hz <= 4.0:
            raise ValueError(f"cadence_hz {self.cadence_hz} outside [0.5, 4.0]")
        if not 0.0 <= self.step_variability <= 0.2:
            raise ValueError("step_variability outside [0, 0.2]")
        if self.preferred_walk_secs < 5.0:
            raise ValueError("preferred_walk_secs must be >= 5 s")


@dataclass(frozen=True)
class StsProfile:
    cycle_period_s: float = 8.0
    plateau_rate: float = 0.0  # probability a rise contains one hesitation plateau

    def __post_init__(self) -> None:
        if not 4.0 <= self.cycle_period_s <= 20.0:
            raise ValueError("cycle_period_s outside [4, 20]")
        if not 0.0 <= self.plateau_rate <= 1.0:
            raise ValueError("plateau_rate outside [0, 1]")


@dataclass(frozen=True)
class SubjectProfile:
    """Everything one simulated subject needs; seed fixed for reproducibility."""

    label: str  # fleet-side handle, e.g. "s001"
    depression_level: float  # latent severity in [0, 3]
    gait: GaitProfile
    sts: StsProfile
    compliance_prob: float
    seed: int
    attributes: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.depression_level <= 3.0:
            raise ValueError("depression_level outside [0, 3]")
        if not 0.0 <= self.compliance_prob <= 1.0:
            raise ValueError("compliance_prob outside [0, 1]")

    def rng(self, *extra: int) -> np.random.Generator:
        """Independent stream for (subject, purpose); replay-stable."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, *extra]))


def make_profiles(
    count: int,
    master_seed: int,
    compliance_prob: float = 1.0,
    plateau_rate: float | None = None,
) -> list[SubjectProfile]:
    """A reproducible fleet: same (count, master_seed) -> identical profiles."""
    children = np.random.SeedSequence(master_seed).spawn(count)
    profiles: list[SubjectProfile] = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        seed = int(child.generate_state(1, dtype=np.uint64)[0])
        level = float(np.round(rng.uniform(0.0, 3.0), 3))
        profiles.append(
            SubjectProfile(
                label=f"s{i + 1:03d}",
                depression_level=level,
                gait=GaitProfile(
                    cadence_hz=float(np.round(rng.uniform(1.4, 2.2), 3)),
                    step_variability=float(np.round(rng.uniform(0.0, 0.04), 4)),
                    preferred_walk_secs=float(np.round(rng.uniform(30.0, 60.0), 1)),
                ),
                sts=StsProfile(
                    cycle_period_s=float(np.round(rng.uniform(6.0, 10.0), 2)),
                    plateau_rate=(
                        plateau_rate
                        if plateau_rate is not None
                        else float(np.round(rng.uniform(0.0, 0.5), 3))
                    ),
                ),
                compliance_prob=compliance_prob,
                seed=seed,
                attributes={"sim_label": f"s{i + 1:03d}", "severity_hint": level},
            )
        )
    return profiles


@dataclass(frozen=True)
class TruthEntry:
    """What one upload really contained, keyed by its idempotency key."""

    idempotency_key: str
    label: str
    day: str
    kind: str  # phq8 | tug | sit_to_stand
    expected_total: int | None = None
    true_step_times: tuple[float, ...] | None = None
    true_transitions: tuple[dict[str, Any], ...] | None = None
    true_plateaus: tuple[dict[str, Any], ...] | None = None

    def to_doc(self) -> dict[str, Any]:
        doc = asdict(self)
        return {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in doc.items() if v is not None
        }


class GroundTruthLog:
    """One entry per upload; replays with the same seeds produce equal logs."""

    def __init__(self) -> None:
        self._entries: dict[str, TruthEntry] = {}

    def add(self, entry: TruthEntry) -> None:
        if entry.idempotency_key in self._entries:
            existing = self._entries[entry.idempotency_key]
            if existing != entry:
                raise ValueError(f"conflicting truth for key {entry.idempotency_key!r}")
            return
        self._entries[entry.idempotency_key] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(sorted(self._entries.values(), key=lambda e: e.idempotency_key))

    def get(self, idempotency_key: str) -> TruthEntry | None:
        return self._entries.get(idempotency_key)

    def to_doc(self) -> list[dict[str, Any]]:
        return [entry.to_doc() for entry in self]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), indent=2, sort_keys=True) + "\n")
