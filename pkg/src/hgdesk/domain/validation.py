"""Entity invariant checks.

``validate_entity`` returns a list of :class:`Violation` (empty list = ok).
Codes are machine-readable and stable; the HTTP layer maps them onto 400
responses.  Cross-entity invariants (e.g. cohort members belonging to the
cohort's study) are only checked when the relevant sibling entities are
passed in via the keyword registries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from hgdesk.domain import timefmt
from hgdesk.domain.entities import (
    Cohort,
    Datapoint,
    Dataset,
    DatasetStatus,
    OccurrenceStatus,
    Rule,
    Schedule,
    Study,
    Subject,
    Task,
    TaskOccurrence,
    TestSet,
    TEST_KINDS,
)

__all__ = ["Violation", "validate_entity", "COMPARATORS", "METRICS_BY_WORKER_KIND"]

COMPARATORS = ("<", "<=", ">", ">=", "==")

# Fields emitted in each worker kind's result body that rules may predicate on.
METRICS_BY_WORKER_KIND: dict[str, tuple[str, ...]] = {
    "phq8": ("total_score",),
    "tug": ("daily_mean",),
    "sit_to_stand": ("total_cycles", "hesitation_total"),
}

# Test params accepted per kind (key -> checker).
_PARAM_SCHEMAS: dict[str, dict[str, Any]] = {
    "phq8": {},
    "tug": {"min_steps": lambda v: isinstance(v, int) and v >= 2},
    "sit_to_stand": {"min_cycles": lambda v: isinstance(v, int) and v >= 1},
}

_SCALAR_TYPES = (str, int, float, bool)


@dataclass(frozen=True)
class Violation:
    code: str
    field: str = ""
    message: str = ""

    def to_doc(self) -> dict[str, str]:
        return {"code": self.code, "field": self.field, "message": self.message}


def _v(code: str, field: str = "", message: str = "") -> Violation:
    return Violation(code=code, field=field, message=message)


def validate_entity(
    entity: Any,
    *,
    subjects: Mapping[str, Subject] | None = None,
    cohorts: Mapping[str, Cohort] | None = None,
    testsets: Mapping[str, TestSet] | None = None,
    datapoints: Mapping[str, Datapoint] | None = None,
) -> list[Violation]:
    if isinstance(entity, Study):
        return _validate_study(entity)
    if isinstance(entity, Subject):
        return _validate_subject(entity)
    if isinstance(entity, Cohort):
        return _validate_cohort(entity, subjects)
    if isinstance(entity, TestSet):
        return _validate_testset(entity)
    if isinstance(entity, Schedule):
        return _validate_schedule(entity, "schedule")
    if isinstance(entity, Task):
        return _validate_task(entity, cohorts, testsets)
    if isinstance(entity, TaskOccurrence):
        return _validate_occurrence(entity)
    if isinstance(entity, Datapoint):
        return _validate_datapoint(entity)
    if isinstance(entity, Dataset):
        return _validate_dataset(entity, datapoints)
    if isinstance(entity, Rule):
        return _validate_rule(entity, cohorts, testsets)
    raise TypeError(f"no validator for {type(entity).__name__}")


def _validate_study(study: Study) -> list[Violation]:
    out: list[Violation] = []
    if not study.name or not study.name.strip():
        out.append(_v("EMPTY_NAME", "name", "study name must be non-empty"))
    return out


def _validate_subject(subject: Subject) -> list[Violation]:
    out: list[Violation] = []
    for key, value in subject.attributes.items():
        if not isinstance(key, str) or not key:
            out.append(_v("BAD_ATTRIBUTE", "attributes", "attribute keys must be strings"))
        elif not isinstance(value, _SCALAR_TYPES):
            out.append(
                _v("BAD_ATTRIBUTE", f"attributes.{key}", "attribute values must be JSON scalars")
            )
    return out


def _validate_cohort(cohort: Cohort, subjects: Mapping[str, Subject] | None) -> list[Violation]:
    out: list[Violation] = []
    if not cohort.name or not cohort.name.strip():
        out.append(_v("EMPTY_NAME", "name", "cohort name must be non-empty"))
    seen: set[str] = set()
    for sid in cohort.member_ids:
        if sid in seen:
            out.append(_v("DUPLICATE_MEMBER", "member_ids", f"{sid} listed twice"))
        seen.add(sid)
        if subjects is not None:
            subject = subjects.get(sid)
            if subject is None:
                out.append(_v("UNKNOWN_MEMBER", "member_ids", f"{sid} does not exist"))
            elif subject.study_id != cohort.study_id:
                out.append(
                    _v("CROSS_STUDY_MEMBER", "member_ids", f"{sid} belongs to another study")
                )
    return out


def _validate_testset(testset: TestSet) -> list[Violation]:
    out: list[Violation] = []
    if not testset.name or not testset.name.strip():
        out.append(_v("EMPTY_NAME", "name", "test-set name must be non-empty"))
    if len(testset.tests) == 0:
        out.append(_v("EMPTY_TESTSET", "tests", "test-set must contain at least one test"))
    for i, test in enumerate(testset.tests):
        if test.kind not in TEST_KINDS:
            out.append(_v("BAD_TEST_KIND", f"tests[{i}].kind", f"unknown kind {test.kind!r}"))
            continue
        schema = _PARAM_SCHEMAS[test.kind]
        for key, value in test.params.items():
            checker = schema.get(key)
            if checker is None:
                out.append(
                    _v("BAD_PARAMS", f"tests[{i}].params.{key}", f"unknown param for {test.kind}")
                )
            elif not checker(value):
                out.append(_v("BAD_PARAMS", f"tests[{i}].params.{key}", "bad value"))
    return out


def _validate_schedule(schedule: Schedule, prefix: str) -> list[Violation]:
    out: list[Violation] = []
    if schedule.mode not in ("once", "daily"):
        out.append(_v("BAD_MODE", f"{prefix}.mode", f"unknown mode {schedule.mode!r}"))
    try:
        start = timefmt.parse_time_of_day(schedule.window_start)
        end = timefmt.parse_time_of_day(schedule.window_end)
        if start >= end:
            out.append(
                _v("BAD_WINDOW", f"{prefix}.window_start", "window_start must precede window_end")
            )
    except ValueError:
        out.append(_v("BAD_WINDOW", f"{prefix}.window_start", "window times must be HH:MM"))
    dates: list[Any] = []
    for field_name in ("start_date", "end_date"):
        raw = getattr(schedule, field_name)
        if raw is None:
            dates.append(None)
            continue
        try:
            dates.append(timefmt.parse_day(raw))
        except ValueError:
            out.append(_v("BAD_DATE_RANGE", f"{prefix}.{field_name}", f"bad date {raw!r}"))
            dates.append(None)
    if dates[0] is not None and dates[1] is not None and dates[0] > dates[1]:
        out.append(_v("BAD_DATE_RANGE", f"{prefix}.start_date", "start_date after end_date"))
    return out


def _validate_task(
    task: Task,
    cohorts: Mapping[str, Cohort] | None,
    testsets: Mapping[str, TestSet] | None,
) -> list[Violation]:
    out = _validate_schedule(task.schedule, "schedule")
    if testsets is not None:
        ts = testsets.get(task.testset_id)
        if ts is None:
            out.append(_v("UNKNOWN_TESTSET", "testset_id", f"{task.testset_id} does not exist"))
        elif ts.study_id != task.study_id:
            out.append(_v("CROSS_STUDY_TESTSET", "testset_id", "test-set from another study"))
    if cohorts is not None:
        cohort = cohorts.get(task.cohort_id)
        if cohort is None:
            out.append(_v("UNKNOWN_COHORT", "cohort_id", f"{task.cohort_id} does not exist"))
        elif cohort.study_id != task.study_id:
            out.append(_v("CROSS_STUDY_COHORT", "cohort_id", "cohort from another study"))
    return out


def _validate_occurrence(occ: TaskOccurrence) -> list[Violation]:
    out: list[Violation] = []
    if occ.status not in {s.value for s in OccurrenceStatus}:
        out.append(_v("BAD_STATUS", "status", f"unknown status {occ.status!r}"))
    if occ.window_start_ms >= occ.window_end_ms:
        out.append(_v("BAD_WINDOW", "window_start", "window_start must precede window_end"))
    try:
        timefmt.parse_day(occ.slot)
    except ValueError:
        out.append(_v("BAD_DATE_RANGE", "slot", f"bad slot {occ.slot!r}"))
    return out


def _validate_datapoint(dp: Datapoint) -> list[Violation]:
    out: list[Violation] = []
    if dp.payload.kind not in ("scalar", "text", "file"):
        out.append(_v("BAD_PAYLOAD", "payload.kind", f"unknown kind {dp.payload.kind!r}"))
    if dp.payload.kind == "file" and dp.payload.object_ref is None:
        out.append(_v("BAD_PAYLOAD", "payload.object", "file payload needs an object reference"))
    if dp.payload.kind == "scalar" and not isinstance(dp.payload.value, (int, float)):
        out.append(_v("BAD_PAYLOAD", "payload.value", "scalar payload needs a number"))
    if dp.payload.kind == "text" and not isinstance(dp.payload.value, str):
        out.append(_v("BAD_PAYLOAD", "payload.value", "text payload needs a string"))
    if not dp.idempotency_key:
        out.append(_v("BAD_IDEMPOTENCY_KEY", "idempotency_key", "must be non-empty"))
    return out


def _validate_dataset(ds: Dataset, datapoints: Mapping[str, Datapoint] | None) -> list[Violation]:
    out: list[Violation] = []
    if ds.status not in {s.value for s in DatasetStatus}:
        out.append(_v("BAD_STATUS", "status", f"unknown status {ds.status!r}"))
    try:
        timefmt.parse_day(ds.day)
    except ValueError:
        out.append(_v("BAD_DATE_RANGE", "day", f"bad day {ds.day!r}"))
    if datapoints is not None:
        for dp_id in ds.datapoint_ids:
            dp = datapoints.get(dp_id)
            if dp is None:
                out.append(_v("UNKNOWN_DATAPOINT", "datapoint_ids", f"{dp_id} does not exist"))
            elif dp.study_id != ds.study_id or dp.test_id != ds.test_id:
                out.append(
                    _v("MIXED_DATASET", "datapoint_ids", f"{dp_id} has another study or test")
                )
    return out


def _validate_rule(
    rule: Rule,
    cohorts: Mapping[str, Cohort] | None,
    testsets: Mapping[str, TestSet] | None,
) -> list[Violation]:
    out: list[Violation] = []
    trigger = rule.trigger
    ttype = trigger.get("type")
    if ttype == "on_result":
        kind = trigger.get("worker_kind")
        if kind not in METRICS_BY_WORKER_KIND:
            out.append(_v("BAD_TRIGGER", "trigger.worker_kind", f"unknown worker kind {kind!r}"))
    elif ttype == "daily":
        try:
            timefmt.parse_time_of_day(trigger.get("time", ""))
        except ValueError:
            out.append(_v("BAD_TRIGGER", "trigger.time", "daily trigger needs HH:MM time"))
    else:
        out.append(_v("BAD_TRIGGER", "trigger.type", f"unknown trigger type {ttype!r}"))

    pred = rule.predicate
    metric = pred.get("metric")
    if not isinstance(metric, str) or not metric:
        out.append(_v("BAD_PREDICATE", "predicate.metric", "metric must be a non-empty string"))
    elif ttype == "on_result" and trigger.get("worker_kind") in METRICS_BY_WORKER_KIND:
        emitted = METRICS_BY_WORKER_KIND[trigger["worker_kind"]]
        if metric not in emitted:
            out.append(
                _v(
                    "UNKNOWN_METRIC",
                    "predicate.metric",
                    f"{metric!r} is not emitted by {trigger['worker_kind']} "
                    f"(emits: {', '.join(emitted)})",
                )
            )
    if pred.get("comparator") not in COMPARATORS:
        out.append(
            _v("BAD_COMPARATOR", "predicate.comparator", f"must be one of {' '.join(COMPARATORS)}")
        )
    if not isinstance(pred.get("value"), (int, float)) or isinstance(pred.get("value"), bool):
        out.append(_v("BAD_PREDICATE", "predicate.value", "value must be a number"))

    action = rule.action
    for key in ("target_testset_id", "sub_cohort_name", "source_cohort_id"):
        if not action.get(key):
            out.append(_v("BAD_ACTION", f"action.{key}", "required"))
    if testsets is not None and action.get("target_testset_id"):
        ts = testsets.get(action["target_testset_id"])
        if ts is None:
            out.append(_v("UNKNOWN_TESTSET", "action.target_testset_id", "does not exist"))
        elif ts.study_id != rule.study_id:
            out.append(
                _v("CROSS_STUDY_TESTSET", "action.target_testset_id", "test-set from another study")
            )
    if cohorts is not None and action.get("source_cohort_id"):
        cohort = cohorts.get(action["source_cohort_id"])
        if cohort is None:
            out.append(_v("UNKNOWN_COHORT", "action.source_cohort_id", "does not exist"))
        elif cohort.study_id != rule.study_id:
            out.append(
                _v("CROSS_STUDY_COHORT", "action.source_cohort_id", "cohort from another study")
            )
    return out
