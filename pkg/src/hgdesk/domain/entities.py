"""Entity types and their canonical JSON documents.

Entities are immutable dataclasses.  The wire/storage form of every entity is
a snake_case JSON document produced by ``to_doc()``; ``canonical_json`` turns
a document into deterministic bytes (sorted keys, no whitespace) so that
serialize -> persist -> load -> serialize round-trips are byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

from hgdesk.domain.timefmt import fmt_ms, parse_ms

__all__ = [
    "canonical_json",
    "OccurrenceStatus",
    "DatasetStatus",
    "ObjectRef",
    "Payload",
    "Study",
    "Subject",
    "Cohort",
    "Test",
    "TestSet",
    "Schedule",
    "Task",
    "TaskOccurrence",
    "Datapoint",
    "Dataset",
    "AnalyticResult",
    "Rule",
    "TEST_KINDS",
    "WORKER_KINDS",
    "OCCURRENCE_TRANSITIONS",
]

# Test kinds double as worker kinds: each published dataset of a kind is
# routed to the worker of the same name.
TEST_KINDS = ("phq8", "tug", "sit_to_stand")
WORKER_KINDS = TEST_KINDS


def canonical_json(doc: Mapping[str, Any]) -> str:
    """Deterministic JSON text for a document."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class OccurrenceStatus(str, Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    COMPLETED = "completed"
    EXPIRED = "expired"


# Monotone lifecycle: forward-only, terminal states absorb.
OCCURRENCE_TRANSITIONS: dict[str, frozenset[str]] = {
    "pending": frozenset({"delivered", "completed", "expired"}),
    "delivered": frozenset({"completed", "expired"}),
    "completed": frozenset(),
    "expired": frozenset(),
}


class DatasetStatus(str, Enum):
    OPEN = "open"
    PUBLISHED = "published"
    PROCESSED = "processed"


def _req(doc: Mapping[str, Any], key: str) -> Any:
    if key not in doc:
        raise ValueError(f"missing field: {key}")
    return doc[key]


@dataclass(frozen=True)
class ObjectRef:
    """Content-addressed reference to a stored file payload."""

    sha256: str
    size_bytes: int
    media_type: str

    def to_doc(self) -> dict[str, Any]:
        return {
            "sha256": self.sha256,
            "size_bytes": self.size_bytes,
            "media_type": self.media_type,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ObjectRef":
        return cls(
            sha256=_req(doc, "sha256"),
            size_bytes=int(_req(doc, "size_bytes")),
            media_type=_req(doc, "media_type"),
        )


@dataclass(frozen=True)
class Payload:
    """Datapoint payload: a scalar, a text document, or a file reference."""

    kind: str  # "scalar" | "text" | "file"
    value: float | str | None = None
    object_ref: ObjectRef | None = None

    def to_doc(self) -> dict[str, Any]:
        if self.kind == "file":
            if self.object_ref is None:
                raise ValueError("file payload without object reference")
            return {"kind": "file", "object": self.object_ref.to_doc()}
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Payload":
        kind = _req(doc, "kind")
        if kind == "file":
            return cls(kind="file", object_ref=ObjectRef.from_doc(_req(doc, "object")))
        if kind not in ("scalar", "text"):
            raise ValueError(f"bad payload kind: {kind!r}")
        return cls(kind=kind, value=_req(doc, "value"))


@dataclass(frozen=True)
class Study:
    study_id: str
    name: str
    created_at: int  # epoch ms

    def to_doc(self) -> dict[str, Any]:
        return {
            "study_id": self.study_id,
            "name": self.name,
            "created_at": fmt_ms(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Study":
        return cls(
            study_id=_req(doc, "study_id"),
            name=_req(doc, "name"),
            created_at=parse_ms(_req(doc, "created_at")),
        )


@dataclass(frozen=True)
class Subject:
    subject_id: str
    study_id: str
    attributes: Mapping[str, Any] = field(default_factory=dict)
    device_id: str | None = None
    created_at: int = 0

    def to_doc(self) -> dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "study_id": self.study_id,
            "attributes": dict(self.attributes),
            "device_id": self.device_id,
            "created_at": fmt_ms(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Subject":
        return cls(
            subject_id=_req(doc, "subject_id"),
            study_id=_req(doc, "study_id"),
            attributes=dict(doc.get("attributes") or {}),
            device_id=doc.get("device_id"),
            created_at=parse_ms(_req(doc, "created_at")),
        )


@dataclass(frozen=True)
class Cohort:
    """Frozen membership snapshot; origin records how it came to be."""

    cohort_id: str
    study_id: str
    name: str
    member_ids: tuple[str, ...] = ()
    origin: Mapping[str, Any] = field(default_factory=lambda: {"type": "manual"})
    created_at: int = 0

    def to_doc(self) -> dict[str, Any]:
        return {
            "cohort_id": self.cohort_id,
            "study_id": self.study_id,
            "name": self.name,
            "member_ids": sorted(self.member_ids),
            "origin": dict(self.origin),
            "created_at": fmt_ms(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Cohort":
        return cls(
            cohort_id=_req(doc, "cohort_id"),
            study_id=_req(doc, "study_id"),
            name=_req(doc, "name"),
            member_ids=tuple(doc.get("member_ids") or ()),
            origin=dict(doc.get("origin") or {"type": "manual"}),
            created_at=parse_ms(_req(doc, "created_at")),
        )


@dataclass(frozen=True)
class Test:
    test_id: str
    kind: str  # one of TEST_KINDS
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {"test_id": self.test_id, "kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Test":
        return cls(
            test_id=_req(doc, "test_id"),
            kind=_req(doc, "kind"),
            params=dict(doc.get("params") or {}),
        )


@dataclass(frozen=True)
class TestSet:
    testset_id: str
    study_id: str
    name: str
    tests: tuple[Test, ...] = ()
    created_at: int = 0

    def to_doc(self) -> dict[str, Any]:
        return {
            "testset_id": self.testset_id,
            "study_id": self.study_id,
            "name": self.name,
            "tests": [t.to_doc() for t in self.tests],
            "created_at": fmt_ms(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "TestSet":
        return cls(
            testset_id=_req(doc, "testset_id"),
            study_id=_req(doc, "study_id"),
            name=_req(doc, "name"),
            tests=tuple(Test.from_doc(t) for t in doc.get("tests") or ()),
            created_at=parse_ms(_req(doc, "created_at")),
        )


@dataclass(frozen=True)
class Schedule:
    """Delivery schedule: once or daily, inside a UTC time-of-day window."""

    mode: str  # "once" | "daily"
    window_start: str = "09:00"  # HH:MM, UTC
    window_end: str = "21:00"
    start_date: str | None = None  # YYYY-MM-DD, inclusive
    end_date: str | None = None  # inclusive

    def to_doc(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "window_start": self.window_start,
            "window_end": self.window_end,
            "start_date": self.start_date,
            "end_date": self.end_date,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Schedule":
        return cls(
            mode=_req(doc, "mode"),
            window_start=doc.get("window_start") or "09:00",
            window_end=doc.get("window_end") or "21:00",
            start_date=doc.get("start_date"),
            end_date=doc.get("end_date"),
        )


@dataclass(frozen=True)
class Task:
    task_id: str
    study_id: str
    testset_id: str
    cohort_id: str
    schedule: Schedule
    created_by: Mapping[str, Any] = field(default_factory=lambda: {"type": "manual"})
    created_at: int = 0

    def to_doc(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "study_id": self.study_id,
            "testset_id": self.testset_id,
            "cohort_id": self.cohort_id,
            "schedule": self.schedule.to_doc(),
            "created_by": dict(self.created_by),
            "created_at": fmt_ms(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Task":
        return cls(
            task_id=_req(doc, "task_id"),
            study_id=_req(doc, "study_id"),
            testset_id=_req(doc, "testset_id"),
            cohort_id=_req(doc, "cohort_id"),
            schedule=Schedule.from_doc(_req(doc, "schedule")),
            created_by=dict(doc.get("created_by") or {"type": "manual"}),
            created_at=parse_ms(_req(doc, "created_at")),
        )


@dataclass(frozen=True)
class TaskOccurrence:
    """One deliverable slot of a task for one subject on one calendar day."""

    occurrence_id: str
    task_id: str
    study_id: str
    subject_id: str
    slot: str  # YYYY-MM-DD
    window_start_ms: int
    window_end_ms: int
    status: str = OccurrenceStatus.PENDING.value

    def to_doc(self) -> dict[str, Any]:
        return {
            "occurrence_id": self.occurrence_id,
            "task_id": self.task_id,
            "study_id": self.study_id,
            "subject_id": self.subject_id,
            "slot": self.slot,
            "window_start": fmt_ms(self.window_start_ms),
            "window_end": fmt_ms(self.window_end_ms),
            "status": self.status,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "TaskOccurrence":
        return cls(
            occurrence_id=_req(doc, "occurrence_id"),
            task_id=_req(doc, "task_id"),
            study_id=_req(doc, "study_id"),
            subject_id=_req(doc, "subject_id"),
            slot=_req(doc, "slot"),
            window_start_ms=parse_ms(_req(doc, "window_start")),
            window_end_ms=parse_ms(_req(doc, "window_end")),
            status=_req(doc, "status"),
        )

    def with_status(self, status: str) -> "TaskOccurrence":
        return replace(self, status=status)


@dataclass(frozen=True)
class Datapoint:
    datapoint_id: str
    study_id: str
    subject_id: str
    occurrence_id: str
    test_id: str
    payload: Payload
    collected_at: int
    uploaded_at: int
    idempotency_key: str
    late: bool = False

    def to_doc(self) -> dict[str, Any]:
        return {
            "datapoint_id": self.datapoint_id,
            "study_id": self.study_id,
            "subject_id": self.subject_id,
            "occurrence_id": self.occurrence_id,
            "test_id": self.test_id,
            "payload": self.payload.to_doc(),
            "collected_at": fmt_ms(self.collected_at),
            "uploaded_at": fmt_ms(self.uploaded_at),
            "idempotency_key": self.idempotency_key,
            "late": self.late,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Datapoint":
        return cls(
            datapoint_id=_req(doc, "datapoint_id"),
            study_id=_req(doc, "study_id"),
            subject_id=_req(doc, "subject_id"),
            occurrence_id=_req(doc, "occurrence_id"),
            test_id=_req(doc, "test_id"),
            payload=Payload.from_doc(_req(doc, "payload")),
            collected_at=parse_ms(_req(doc, "collected_at")),
            uploaded_at=parse_ms(_req(doc, "uploaded_at")),
            idempotency_key=_req(doc, "idempotency_key"),
            late=bool(doc.get("late", False)),
        )


@dataclass(frozen=True)
class Dataset:
    """Publishing granularity: all datapoints of one (study, test, UTC day)."""

    dataset_id: str
    study_id: str
    testset_id: str
    test_id: str
    day: str
    datapoint_ids: tuple[str, ...] = ()
    status: str = DatasetStatus.OPEN.value

    def to_doc(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "study_id": self.study_id,
            "testset_id": self.testset_id,
            "test_id": self.test_id,
            "day": self.day,
            "datapoint_ids": list(self.datapoint_ids),
            "status": self.status,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Dataset":
        return cls(
            dataset_id=_req(doc, "dataset_id"),
            study_id=_req(doc, "study_id"),
            testset_id=_req(doc, "testset_id"),
            test_id=_req(doc, "test_id"),
            day=_req(doc, "day"),
            datapoint_ids=tuple(doc.get("datapoint_ids") or ()),
            status=doc.get("status", DatasetStatus.OPEN.value),
        )


@dataclass(frozen=True)
class AnalyticResult:
    result_id: str
    study_id: str
    dataset_id: str
    datapoint_id: str
    subject_id: str
    worker_kind: str
    produced_at: int
    body: Mapping[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {
            "result_id": self.result_id,
            "study_id": self.study_id,
            "dataset_id": self.dataset_id,
            "datapoint_id": self.datapoint_id,
            "subject_id": self.subject_id,
            "worker_kind": self.worker_kind,
            "produced_at": fmt_ms(self.produced_at),
            "body": dict(self.body),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "AnalyticResult":
        return cls(
            result_id=_req(doc, "result_id"),
            study_id=_req(doc, "study_id"),
            dataset_id=_req(doc, "dataset_id"),
            datapoint_id=_req(doc, "datapoint_id"),
            subject_id=_req(doc, "subject_id"),
            worker_kind=_req(doc, "worker_kind"),
            produced_at=parse_ms(_req(doc, "produced_at")),
            body=dict(doc.get("body") or {}),
        )


@dataclass(frozen=True)
class Rule:
    """Automation rule: trigger + metric predicate + follow-up action.

    trigger:   {"type": "on_result", "worker_kind": k} or
               {"type": "daily", "time": "HH:MM"}
    predicate: {"metric": str, "comparator": "<"|"<="|">"|">="|"==", "value": num}
    action:    {"target_testset_id": str, "sub_cohort_name": str,
                "source_cohort_id": str}
    """

    rule_id: str
    study_id: str
    trigger: Mapping[str, Any]
    predicate: Mapping[str, Any]
    action: Mapping[str, Any]
    active: bool = True
    created_at: int = 0

    def to_doc(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "study_id": self.study_id,
            "trigger": dict(self.trigger),
            "predicate": dict(self.predicate),
            "action": dict(self.action),
            "active": self.active,
            "created_at": fmt_ms(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Rule":
        return cls(
            rule_id=_req(doc, "rule_id"),
            study_id=_req(doc, "study_id"),
            trigger=dict(_req(doc, "trigger")),
            predicate=dict(_req(doc, "predicate")),
            action=dict(_req(doc, "action")),
            active=bool(doc.get("active", True)),
            created_at=parse_ms(_req(doc, "created_at")),
        )
