"""Virtual device fleet: drives a whole study lifecycle over the HTTP API.

The fleet owns nothing but HTTP calls and seeds. Against a server started
with the virtual clock it sets up a study (subjects, cohort, test-sets, a
daily mood task, and a score-threshold rule that fans out a gait
follow-up), then walks the clock through each day:

    00:05  tick  — yesterday's datasets publish, today's occurrences fan out
           drain — analytics jobs run to completion (embedded or external)
    10:00  every device polls, flips its compliance coin, synthesizes
           each delivered test, and uploads with a deterministic key
    21:00  tick  — windows close, lapsed occurrences expire, rules fire

All randomness comes from per-(subject, stream, day) generators, so the
report and ground-truth log are byte-identical across reruns; server-minted
ids never appear in the report (subjects are keyed by their sim labels).
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import httpx

from hgdesk.domain.timefmt import MS_PER_DAY, at_time_of_day, day_bounds_ms, day_of_ms, fmt_ms
from hgdesk.sim.profiles import GroundTruthLog, SubjectProfile, TruthEntry
from hgdesk.sim.synth import accel_doc, phq8_doc, pose_doc, synth_accel, synth_phq8, synth_pose

__all__ = ["FleetError", "FleetHandles", "FleetResult", "run_fleet", "DEFAULT_RULE_PREDICATE"]

# independent rng streams per (subject, stream, day[, seq])
STREAM_COMPLIANCE = 1
STREAM_PHQ8 = 2
STREAM_ACCEL = 3
STREAM_POSE = 4

DEFAULT_RULE_PREDICATE = {"metric": "total_score", "comparator": "<", "value": 10}
DEFAULT_POSE_CYCLES = 5


class FleetError(RuntimeError):
    pass


@dataclass(frozen=True)
class FleetHandles:
    """Server-minted ids for everything the fleet created."""

    study_id: str
    researcher_token: str
    cohort_id: str
    phq8_testset_id: str
    followup_testset_id: str
    task_id: str
    rule_id: str | None
    devices: Mapping[str, Mapping[str, str]]  # label -> {subject_id, device_id, token}

    def label_of(self, subject_id: str) -> str | None:
        for label, dev in self.devices.items():
            if dev["subject_id"] == subject_id:
                return label
        return None


@dataclass
class FleetResult:
    report: dict[str, Any]
    truth: GroundTruthLog
    handles: FleetHandles


@dataclass
class _SubjectDayOutcome:
    attempted: int = 0
    completed: int = 0
    skipped: int = 0
    missed: int = 0
    by_kind: dict[str, int] = field(default_factory=dict)
    uploads: list[dict[str, Any]] = field(default_factory=list)
    truth: list[TruthEntry] = field(default_factory=list)


def _shift_day(day: str, n: int) -> str:
    return day_of_ms(day_bounds_ms(day)[0] + n * MS_PER_DAY)


class _Fleet:
    def __init__(
        self,
        base_url: str,
        profiles: Sequence[SubjectProfile],
        days: int,
        *,
        start_day: str,
        study_name: str,
        rule_predicate: Mapping[str, Any] | None,
        sub_cohort_name: str,
        followup_kind: str,
        pose_cycles: int,
        worker_token: str | None,
        drain_timeout_s: float,
        max_in_flight: int,
        request_timeout_s: float,
        retries: int,
    ) -> None:
        if days < 1:
            raise FleetError("need at least one simulated day")
        if not profiles:
            raise FleetError("need at least one subject profile")
        self.profiles = list(profiles)
        self.days = days
        self.start_day = start_day
        self.study_name = study_name
        self.rule_predicate = dict(rule_predicate) if rule_predicate else None
        self.sub_cohort_name = sub_cohort_name
        self.followup_kind = followup_kind
        self.pose_cycles = pose_cycles
        self.worker_token = worker_token
        self.drain_timeout_s = drain_timeout_s
        self.max_in_flight = max_in_flight
        self.retries = retries
        self.http = httpx.Client(base_url=base_url.rstrip("/"), timeout=request_timeout_s)
        self.base_url = base_url.rstrip("/")
        self.truth = GroundTruthLog()
        self.now_ms = 0

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    def _request(
        self,
        method: str,
        path: str,
        *,
        token: str | None = None,
        json_body: Mapping[str, Any] | None = None,
        params: Mapping[str, Any] | None = None,
        ok: tuple[int, ...] = (200, 201, 204),
    ) -> httpx.Response:
        headers = {"authorization": f"Bearer {token}"} if token else {}
        last_exc: Exception | None = None
        for attempt in range(self.retries):
            try:
                response = self.http.request(
                    method, path, headers=headers, json=json_body, params=params
                )
            except httpx.TransportError as exc:  # retry, then surface
                last_exc = exc
                time.sleep(0.2 * (attempt + 1))
                continue
            if response.status_code in ok:
                return response
            raise FleetError(
                f"{method} {path} -> {response.status_code}: {response.text[:300]}"
            )
        raise FleetError(f"{method} {path} unreachable after {self.retries} tries: {last_exc}")

    def _set_clock(self, day: str, time_of_day: str) -> None:
        self.now_ms = at_time_of_day(day, time_of_day)
        self._request("POST", "/v1/internal/clock", json_body={"set": fmt_ms(self.now_ms)})

    def _tick(self) -> dict[str, Any]:
        return self._request("POST", "/v1/internal/tick").json()

    def _drain_queue(self) -> None:
        if self.worker_token is not None:
            from hgdesk.workers.kit import HttpWorkerClient, run_until_drained

            client = HttpWorkerClient(self.base_url, self.worker_token)
            try:
                report = run_until_drained(client)
            finally:
                client.close()
            if report.failed:
                raise FleetError(f"embedded workers failed jobs: {report.errors[:3]}")
            return
        deadline = time.monotonic() + self.drain_timeout_s
        while True:
            stats = self._request(
                "GET", "/v1/queue/stats", token=self.handles.researcher_token
            ).json()
            backlog = stats["totals"]["ready"] + stats["totals"]["leased"]
            if backlog == 0:
                return
            if time.monotonic() > deadline:
                raise FleetError(
                    f"queue backlog of {backlog} not draining — are workers running?"
                )
            time.sleep(0.05)

    # ------------------------------------------------------------------
    # study setup
    # ------------------------------------------------------------------

    def setup(self) -> None:
        meta = self._request("GET", "/v1/meta").json()
        if not meta.get("virtual_clock"):
            raise FleetError("fleet needs a server running with the virtual clock")
        self._set_clock(self.start_day, "00:00")

        study = self._request("POST", "/v1/studies", json_body={"name": self.study_name}).json()
        study_id = study["study"]["study_id"]
        token = study["token"]

        devices: dict[str, dict[str, str]] = {}
        for profile in self.profiles:
            created = self._request(
                "POST",
                f"/v1/studies/{study_id}/subjects",
                token=token,
                json_body={"raw_id": profile.label, "attributes": dict(profile.attributes)},
            ).json()
            devices[profile.label] = {
                "subject_id": created["subject"]["subject_id"],
                "device_id": created["subject"]["device_id"],
                "token": created["device_token"],
            }

        cohort = self._request(
            "POST",
            f"/v1/studies/{study_id}/cohorts",
            token=token,
            json_body={
                "name": "fleet-all",
                "selector": {
                    "type": "explicit",
                    "member_ids": [d["subject_id"] for d in devices.values()],
                },
            },
        ).json()["cohort"]

        phq8_ts = self._request(
            "POST",
            f"/v1/studies/{study_id}/testsets",
            token=token,
            json_body={"name": "daily-mood", "tests": [{"kind": "phq8", "params": {}}]},
        ).json()["testset"]
        followup_ts = self._request(
            "POST",
            f"/v1/studies/{study_id}/testsets",
            token=token,
            json_body={
                "name": f"{self.followup_kind}-followup",
                "tests": [{"kind": self.followup_kind, "params": {}}],
            },
        ).json()["testset"]

        task = self._request(
            "POST",
            f"/v1/studies/{study_id}/tasks",
            token=token,
            json_body={
                "testset_id": phq8_ts["testset_id"],
                "cohort_id": cohort["cohort_id"],
                "schedule": {
                    "mode": "daily",
                    "window_start": "09:00",
                    "window_end": "21:00",
                    "start_date": self.start_day,
                    "end_date": _shift_day(self.start_day, self.days - 1),
                },
            },
        ).json()["task"]

        rule_id = None
        if self.rule_predicate is not None:
            rule = self._request(
                "POST",
                f"/v1/studies/{study_id}/rules",
                token=token,
                json_body={
                    "trigger": {"type": "on_result", "worker_kind": "phq8"},
                    "predicate": self.rule_predicate,
                    "action": {
                        "source_cohort_id": cohort["cohort_id"],
                        "sub_cohort_name": self.sub_cohort_name,
                        "target_testset_id": followup_ts["testset_id"],
                    },
                },
            ).json()["rule"]
            rule_id = rule["rule_id"]

        self.handles = FleetHandles(
            study_id=study_id,
            researcher_token=token,
            cohort_id=cohort["cohort_id"],
            phq8_testset_id=phq8_ts["testset_id"],
            followup_testset_id=followup_ts["testset_id"],
            task_id=task["task_id"],
            rule_id=rule_id,
            devices=devices,
        )

    # ------------------------------------------------------------------
    # one subject, one day
    # ------------------------------------------------------------------

    def _synthesize(
        self, profile: SubjectProfile, kind: str, day_index: int, seq: int, occurrence_id: str
    ) -> tuple[dict[str, Any], TruthEntry]:
        device = self.handles.devices[profile.label]
        day = _shift_day(self.start_day, day_index)
        key = f"{profile.label}:{day}:{kind}:{seq}"
        if kind == "phq8":
            rng = profile.rng(STREAM_PHQ8, day_index, seq)
            answers, expected = synth_phq8(profile, rng)
            doc = phq8_doc(device["subject_id"], occurrence_id, self.now_ms, answers)
            truth = TruthEntry(key, profile.label, day, kind, expected_total=expected)
        elif kind == "tug":
            rng = profile.rng(STREAM_ACCEL, day_index, seq)
            samples, step_times = synth_accel(profile, profile.gait.preferred_walk_secs, rng)
            doc = accel_doc(device["subject_id"], device["device_id"], self.now_ms, samples)
            truth = TruthEntry(
                key, profile.label, day, kind, true_step_times=tuple(step_times)
            )
        elif kind == "sit_to_stand":
            rng = profile.rng(STREAM_POSE, day_index, seq)
            rows, pose_truth = synth_pose(profile, self.pose_cycles, None, rng)
            doc = pose_doc(rows)
            transitions = tuple(
                sorted(
                    list(pose_truth["rises"]) + list(pose_truth["falls"]),
                    key=lambda tr: tr["t_start"],
                )
            )
            truth = TruthEntry(
                key,
                profile.label,
                day,
                kind,
                true_transitions=transitions,
                true_plateaus=tuple(pose_truth["plateaus"]),
            )
        else:
            raise FleetError(f"fleet cannot synthesize test kind {kind!r}")
        return doc, truth

    def _subject_day(self, profile: SubjectProfile, day_index: int) -> _SubjectDayOutcome:
        out = _SubjectDayOutcome()
        device = self.handles.devices[profile.label]
        day = _shift_day(self.start_day, day_index)
        response = self._request(
            "GET",
            f"/v1/devices/{device['device_id']}/pending-tasks",
            token=device["token"],
        )
        descriptors = response.json()["tasks"]
        # stable order across reruns: by the test kinds offered, then window
        descriptors.sort(
            key=lambda d: (
                tuple(t["kind"] for t in d["testset"]["tests"]),
                d["occurrence"]["window_start"],
            )
        )
        seq_by_kind: dict[str, int] = {}
        for desc_index, descriptor in enumerate(descriptors):
            coin = profile.rng(STREAM_COMPLIANCE, day_index, desc_index).random()
            if coin >= profile.compliance_prob:
                out.skipped += len(descriptor["testset"]["tests"])
                continue
            occurrence_id = descriptor["occurrence"]["occurrence_id"]
            for test in descriptor["testset"]["tests"]:
                kind = test["kind"]
                seq = seq_by_kind.get(kind, 0)
                seq_by_kind[kind] = seq + 1
                doc, truth = self._synthesize(profile, kind, day_index, seq, occurrence_id)
                out.attempted += 1
                try:
                    self._request(
                        "POST",
                        "/v1/uploads",
                        token=device["token"],
                        json_body={
                            "occurrence_id": occurrence_id,
                            "test_id": test["test_id"],
                            "idempotency_key": truth.idempotency_key,
                            "collected_at": fmt_ms(self.now_ms),
                            "document": doc,
                        },
                    )
                except FleetError as exc:
                    if "unreachable" not in str(exc):
                        raise  # API rejection is a bug, not weather
                    out.missed += 1
                    continue
                out.completed += 1
                out.by_kind[kind] = out.by_kind.get(kind, 0) + 1
                out.uploads.append(
                    {
                        "key": truth.idempotency_key,
                        "label": profile.label,
                        "day": day,
                        "kind": kind,
                    }
                )
                out.truth.append(truth)
        return out

    # ------------------------------------------------------------------
    # the run
    # ------------------------------------------------------------------

    def run(self, drain_days: int = 1) -> FleetResult:
        self.setup()
        per_subject: dict[str, dict[str, Any]] = {
            p.label: {
                "compliance_prob": p.compliance_prob,
                "attempted": 0,
                "completed": 0,
                "skipped": 0,
                "missed": 0,
                "by_kind": {},
            }
            for p in self.profiles
        }
        uploads: list[dict[str, Any]] = []
        ticks: list[dict[str, Any]] = []

        total_days = self.days + drain_days
        for day_index in range(total_days):
            day = _shift_day(self.start_day, day_index)
            self._set_clock(day, "00:05")
            summary = self._tick()
            summary["phase"] = "open"
            summary["day"] = day
            ticks.append(summary)
            self._drain_queue()

            if day_index < self.days:
                self._set_clock(day, "10:00")
                workers = min(self.max_in_flight, len(self.profiles))
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    outcomes = list(
                        pool.map(lambda p: self._subject_day(p, day_index), self.profiles)
                    )
                for profile, outcome in zip(self.profiles, outcomes):
                    row = per_subject[profile.label]
                    row["attempted"] += outcome.attempted
                    row["completed"] += outcome.completed
                    row["skipped"] += outcome.skipped
                    row["missed"] += outcome.missed
                    for kind, n in outcome.by_kind.items():
                        row["by_kind"][kind] = row["by_kind"].get(kind, 0) + n
                    uploads.extend(outcome.uploads)
                    for entry in outcome.truth:
                        self.truth.add(entry)

            self._set_clock(day, "21:00")
            summary = self._tick()
            summary["phase"] = "close"
            summary["day"] = day
            ticks.append(summary)

        report = self._build_report(per_subject, uploads, ticks, drain_days)
        return FleetResult(report=report, truth=self.truth, handles=self.handles)

    def _build_report(
        self,
        per_subject: dict[str, dict[str, Any]],
        uploads: list[dict[str, Any]],
        ticks: list[dict[str, Any]],
        drain_days: int,
    ) -> dict[str, Any]:
        handles = self.handles
        token = handles.researcher_token
        totals = {
            key: sum(row[key] for row in per_subject.values())
            for key in ("attempted", "completed", "skipped", "missed")
        }

        server_datapoints = self._request(
            "GET", f"/v1/studies/{handles.study_id}/datapoints", token=token
        ).json()["datapoints"]
        occurrence_rows = self._request(
            "GET", f"/v1/studies/{handles.study_id}/occurrences", token=token
        ).json()["occurrences"]
        occurrence_tally: dict[str, int] = {}
        for occ in occurrence_rows:
            occurrence_tally[occ["status"]] = occurrence_tally.get(occ["status"], 0) + 1
        datasets = self._request(
            "GET", f"/v1/studies/{handles.study_id}/datasets", token=token
        ).json()["datasets"]
        dataset_tally: dict[str, int] = {}
        for ds in datasets:
            dataset_tally[ds["status"]] = dataset_tally.get(ds["status"], 0) + 1

        rule_runs: list[dict[str, Any]] = []
        if handles.rule_id is not None:
            label_by_subject = {
                dev["subject_id"]: label for label, dev in handles.devices.items()
            }
            cohorts = self._request(
                "GET", f"/v1/studies/{handles.study_id}/cohorts", token=token
            ).json()["cohorts"]
            members_by_cohort = {c["cohort_id"]: c["member_ids"] for c in cohorts}
            runs = self._request(
                "GET",
                f"/v1/studies/{handles.study_id}/rules/{handles.rule_id}/runs",
                token=token,
            ).json()["runs"]
            for run in runs:
                members = members_by_cohort.get(run["cohort_id"] or "", [])
                rule_runs.append(
                    {
                        "day": run["day"],
                        "fired": run["cohort_id"] is not None,
                        "matched_labels": sorted(
                            label_by_subject.get(m, m) for m in members
                        ),
                    }
                )
            rule_runs.sort(key=lambda r: r["day"])

        return {
            "study_name": self.study_name,
            "start_day": self.start_day,
            "upload_days": self.days,
            "drain_days": drain_days,
            "subjects": len(self.profiles),
            "per_subject": per_subject,
            "totals": totals,
            "uploads": sorted(uploads, key=lambda u: u["key"]),
            "ticks": ticks,
            "occurrences": dict(sorted(occurrence_tally.items())),
            "datasets": dict(sorted(dataset_tally.items())),
            "rule_runs": rule_runs,
            "reconciliation": {
                "fleet_completed": totals["completed"],
                "server_datapoints": len(server_datapoints),
                "match": totals["completed"] == len(server_datapoints),
            },
        }

    def close(self) -> None:
        self.http.close()


def run_fleet(
    base_url: str,
    profiles: Sequence[SubjectProfile],
    days: int,
    *,
    start_day: str = "2026-03-02",
    study_name: str = "fleet-study",
    rule_predicate: Mapping[str, Any] | None = DEFAULT_RULE_PREDICATE,
    sub_cohort_name: str = "needs-gait",
    followup_kind: str = "tug",
    pose_cycles: int = DEFAULT_POSE_CYCLES,
    worker_token: str | None = None,
    drain_days: int = 1,
    drain_timeout_s: float = 120.0,
    max_in_flight: int = 32,
    request_timeout_s: float = 30.0,
    retries: int = 3,
) -> FleetResult:
    """Run the whole fleet lifecycle against a virtual-clock server.

    With ``worker_token`` the fleet drains analytics jobs itself each
    morning; without it, external workers must be consuming the queue.
    """
    fleet = _Fleet(
        base_url,
        profiles,
        days,
        start_day=start_day,
        study_name=study_name,
        rule_predicate=rule_predicate,
        sub_cohort_name=sub_cohort_name,
        followup_kind=followup_kind,
        pose_cycles=pose_cycles,
        worker_token=worker_token,
        drain_timeout_s=drain_timeout_s,
        max_in_flight=max_in_flight,
        request_timeout_s=request_timeout_s,
        retries=retries,
    )
    try:
        return fleet.run(drain_days=drain_days)
    finally:
        fleet.close()
