"""High-level clinical-task-manager operations over the datastore.

Every mutating operation validates its inputs against the domain
invariants and enforces that referenced entities share one study. The
HTTP layer is a thin shell over this class, so tests can drive the whole
service in process.
"""
from __future__ import annotations

from typing import Any, Mapping, Sequence

from hgdesk.clock import Clock
from hgdesk.domain.entities import (
    Cohort,
    Datapoint,
    Rule,
    Schedule,
    Study,
    Subject,
    Task,
    TaskOccurrence,
    Test,
    TestSet,
    canonical_json,
)
from hgdesk.domain.ids import new_id
from hgdesk.domain.timefmt import at_time_of_day, day_of_ms
from hgdesk.domain.validation import COMPARATORS, validate_entity
from hgdesk.errors import Forbidden, NotFound, ValidationFailed
from hgdesk.jobqueue import JobQueue
from hgdesk.store.datastore import Credential, Datastore, UploadEnvelope
from hgdesk.store.payloads import EXPECTED_PAYLOAD_KIND

__all__ = ["CtmService"]


def _fail(code: str, field: str, message: str) -> ValidationFailed:
    err = ValidationFailed(message, details=[{"code": code, "field": field, "message": message}])
    err.code = code
    return err


class CtmService:
    def __init__(self, store: Datastore, queue: JobQueue, clock: Clock) -> None:
        self.store = store
        self.queue = queue
        self.clock = clock

    # ------------------------------------------------------------------
    # studies + subjects
    # ------------------------------------------------------------------

    def create_study(self, name: str) -> tuple[Study, str]:
        """Create a tenant; the researcher token is returned exactly once."""
        study = self.store.create_study(name)
        token = self.store.mint_credential("researcher", study_id=study.study_id)
        return study, token

    def enroll_subject(
        self, study_id: str, raw_id: str, attributes: Mapping[str, Any] | None = None
    ) -> tuple[Subject, str]:
        """Enroll by external id; returns the subject and its device token.

        The external id never leaves the vault — the subject is known
        everywhere else by its study-salted pseudonym. Re-enrolling the
        same raw id returns the existing subject with a fresh device token.
        """
        self.store.get_study(study_id)
        if not raw_id or not str(raw_id).strip():
            raise _fail("EMPTY_NAME", "raw_id", "subject raw_id must be non-empty")
        subject_id = self.store.pseudonymize(study_id, str(raw_id))
        existing = self.store.find_subject(subject_id)
        if existing is not None:
            token = self.store.mint_credential(
                "device",
                study_id=study_id,
                subject_id=subject_id,
                device_id=existing.device_id,
            )
            return existing, token
        subject = Subject(
            subject_id=subject_id,
            study_id=study_id,
            attributes=dict(attributes or {}),
            device_id=new_id("device"),
            created_at=self.clock.now_ms(),
        )
        violations = validate_entity(subject)
        if violations:
            raise ValidationFailed.from_violations(violations)
        self.store.put_subject(subject)
        token = self.store.mint_credential(
            "device", study_id=study_id, subject_id=subject_id, device_id=subject.device_id
        )
        return subject, token

    # ------------------------------------------------------------------
    # cohorts
    # ------------------------------------------------------------------

    def define_cohort(
        self,
        study_id: str,
        name: str,
        selector: Mapping[str, Any],
        origin: Mapping[str, Any] | None = None,
    ) -> Cohort:
        """Freeze a membership snapshot from an explicit list or a filter."""
        self.store.get_study(study_id)
        subjects = {s.subject_id: s for s in self.store.list_subjects(study_id)}
        stype = selector.get("type")
        if stype == "explicit":
            member_ids = list(selector.get("member_ids") or [])
            for sid in member_ids:
                if sid not in subjects:
                    found = self.store.find_subject(sid)
                    if found is None:
                        raise NotFound(f"subject {sid} not found")
                    raise Forbidden(f"subject {sid} belongs to another study")
        elif stype == "filter":
            member_ids = self._filter_members(subjects, selector.get("predicates"))
        else:
            raise _fail("BAD_FILTER", "selector.type", f"unknown selector type {stype!r}")
        cohort = Cohort(
            cohort_id=new_id("cohort"),
            study_id=study_id,
            name=name,
            member_ids=tuple(sorted(set(member_ids))),
            origin=dict(origin or {"type": "manual", "selector": dict(selector)}),
            created_at=self.clock.now_ms(),
        )
        violations = validate_entity(cohort, subjects=subjects)
        if violations:
            raise ValidationFailed.from_violations(violations)
        self.store.put_cohort(cohort)
        return cohort

    @staticmethod
    def _filter_members(
        subjects: Mapping[str, Subject], predicates: Sequence[Mapping[str, Any]] | None
    ) -> list[str]:
        if not isinstance(predicates, Sequence) or not predicates:
            raise _fail("BAD_FILTER", "selector.predicates", "filter needs a predicate list")
        known_attributes = {key for s in subjects.values() for key in s.attributes}
        for i, pred in enumerate(predicates):
            attribute = pred.get("attribute") if isinstance(pred, Mapping) else None
            if not isinstance(attribute, str) or not attribute:
                raise _fail(
                    "BAD_FILTER", f"selector.predicates[{i}].attribute", "attribute required"
                )
            if pred.get("comparator") not in COMPARATORS:
                raise _fail(
                    "BAD_FILTER",
                    f"selector.predicates[{i}].comparator",
                    f"comparator must be one of {' '.join(COMPARATORS)}",
                )
            if not isinstance(pred.get("value"), (str, int, float)) or isinstance(
                pred.get("value"), bool
            ):
                raise _fail(
                    "BAD_FILTER", f"selector.predicates[{i}].value", "value must be a scalar"
                )
            if attribute not in known_attributes:
                raise _fail(
                    "BAD_FILTER",
                    f"selector.predicates[{i}].attribute",
                    f"attribute {attribute!r} is not set on any subject in the study",
                )
        return [
            sid
            for sid, subject in subjects.items()
            if all(_attribute_matches(subject, p) for p in predicates)
        ]

    # ------------------------------------------------------------------
    # test-sets
    # ------------------------------------------------------------------

    def define_testset(
        self, study_id: str, name: str, tests: Sequence[Mapping[str, Any]]
    ) -> TestSet:
        self.store.get_study(study_id)
        testset = TestSet(
            testset_id=new_id("testset"),
            study_id=study_id,
            name=name,
            tests=tuple(
                Test(
                    test_id=new_id("test"),
                    kind=str(t.get("kind", "")),
                    params=dict(t.get("params") or {}),
                )
                for t in tests
            ),
            created_at=self.clock.now_ms(),
        )
        violations = validate_entity(testset)
        if violations:
            raise ValidationFailed.from_violations(violations)
        self.store.put_testset(testset)
        return testset

    # ------------------------------------------------------------------
    # tasks + occurrences
    # ------------------------------------------------------------------

    def create_task(
        self,
        study_id: str,
        testset_id: str,
        cohort_id: str,
        schedule_doc: Mapping[str, Any],
        created_by: Mapping[str, Any] | None = None,
    ) -> tuple[Task, list[TaskOccurrence]]:
        """Map a test-set onto a cohort; once-tasks fan out immediately."""
        self.store.get_study(study_id)
        schedule = Schedule.from_doc(dict(schedule_doc))
        task = Task(
            task_id=new_id("task"),
            study_id=study_id,
            testset_id=testset_id,
            cohort_id=cohort_id,
            schedule=schedule,
            created_by=dict(created_by or {"type": "manual"}),
            created_at=self.clock.now_ms(),
        )
        cohorts = {c.cohort_id: c for c in self.store.list_cohorts(study_id)}
        testsets = {t.testset_id: t for t in self.store.list_testsets(study_id)}
        # cross-study references are a tenancy violation, not a 400
        foreign_testset = testsets.get(testset_id) is None and self.store.find_testset(testset_id)
        foreign_cohort = cohorts.get(cohort_id) is None and self.store.find_cohort(cohort_id)
        if foreign_testset or foreign_cohort:
            raise Forbidden("task references entities from another study")
        violations = validate_entity(task, cohorts=cohorts, testsets=testsets)
        if violations:
            raise ValidationFailed.from_violations(violations)
        self.store.put_task(task)

        occurrences: list[TaskOccurrence] = []
        if schedule.mode == "once":
            slot = schedule.start_date or day_of_ms(self.clock.now_ms())
            cohort = cohorts[cohort_id]
            occurrences = self.materialize_occurrences(task, cohort.member_ids, slot)
        return task, occurrences

    def materialize_occurrences(
        self, task: Task, subject_ids: Sequence[str], slot: str
    ) -> list[TaskOccurrence]:
        """Create the day's pending occurrence per subject (idempotent)."""
        window_start = at_time_of_day(slot, task.schedule.window_start)
        window_end = at_time_of_day(slot, task.schedule.window_end)
        out: list[TaskOccurrence] = []
        for subject_id in sorted(subject_ids):
            occ = TaskOccurrence(
                occurrence_id=new_id("occurrence"),
                task_id=task.task_id,
                study_id=task.study_id,
                subject_id=subject_id,
                slot=slot,
                window_start_ms=window_start,
                window_end_ms=window_end,
            )
            if self.store.put_occurrence(occ):
                out.append(occ)
        return out

    # ------------------------------------------------------------------
    # device polling + uploads
    # ------------------------------------------------------------------

    def poll_tasks(self, device_id: str, now_ms: int | None = None) -> list[dict[str, Any]]:
        """Deliverable occurrences for a device, as self-contained descriptors.

        Pending occurrences transition to delivered; already-delivered ones
        are returned again as reminders until completed or expired.
        """
        subject = self.store.get_subject_by_device(device_id)
        if subject is None:
            raise NotFound(f"device {device_id} not found")
        now = now_ms if now_ms is not None else self.clock.now_ms()
        descriptors: list[dict[str, Any]] = []
        for occ in self.store.due_occurrences(subject.subject_id, now):
            if occ.status == "pending":
                occ = self.store.transition_occurrence(occ.occurrence_id, "delivered")
            task = self.store.get_task(occ.task_id)
            testset = self.store.get_testset(task.testset_id)
            descriptors.append(
                {
                    "occurrence": occ.to_doc(),
                    "task_id": task.task_id,
                    "testset": {
                        "testset_id": testset.testset_id,
                        "name": testset.name,
                        "tests": [t.to_doc() for t in testset.tests],
                    },
                }
            )
        return descriptors

    def upload(
        self,
        credential: Credential,
        occurrence_id: str,
        test_id: str,
        idempotency_key: str,
        collected_at_ms: int,
        document: Mapping[str, Any],
    ) -> tuple[Datapoint, bool]:
        """Accept one test document for one occurrence (idempotent)."""
        occ = self.store.get_occurrence(occurrence_id)
        if credential.role == "device":
            if credential.subject_id != occ.subject_id:
                raise Forbidden("device is not bound to this occurrence's subject")
        elif credential.role == "researcher":
            if credential.study_id != occ.study_id:
                raise Forbidden("credential is scoped to another study")
        else:
            raise Forbidden("uploads require a device or researcher token")
        test, _, _ = self.store.get_test(test_id)
        payload_kind = EXPECTED_PAYLOAD_KIND.get(test.kind, "file")
        content = canonical_json(dict(document))
        envelope = UploadEnvelope(
            occurrence_id=occurrence_id,
            test_id=test_id,
            idempotency_key=idempotency_key,
            collected_at=collected_at_ms,
            payload_kind=payload_kind,
            content=content if payload_kind == "text" else content.encode("utf-8"),
        )
        return self.store.ingest(envelope)

    # ------------------------------------------------------------------
    # results
    # ------------------------------------------------------------------

    def submit_result(
        self,
        datapoint_id: str,
        dataset_id: str,
        worker_kind: str,
        body: Mapping[str, Any],
    ) -> Any:
        dataset = self.store.get_dataset(dataset_id)  # NotFound surfaces here
        datapoint = self.store.get_datapoint(datapoint_id)
        if datapoint.study_id != dataset.study_id:
            raise _fail("MIXED_DATASET", "datapoint_id", "datapoint is not in this dataset's study")
        return self.store.upsert_result(
            datapoint_id=datapoint_id,
            dataset_id=dataset_id,
            worker_kind=worker_kind,
            body=dict(body),
        )

    def query_results(
        self,
        credential: Credential,
        study_id: str,
        subject_id: str | None = None,
        worker_kind: str | None = None,
        from_ms: int | None = None,
        to_ms: int | None = None,
    ) -> list[Any]:
        """Longitudinal results, ascending by produced_at.

        Device tokens see only their own subject's series; researcher
        tokens see the whole study.
        """
        self.store.get_study(study_id)
        if credential.role == "device":
            if subject_id is not None and subject_id != credential.subject_id:
                raise Forbidden("device tokens may only read their own subject's results")
            subject_id = credential.subject_id
        return self.store.query_results(
            study_id=study_id,
            subject_id=subject_id,
            worker_kind=worker_kind,
            from_ms=from_ms,
            to_ms=to_ms,
        )

    # ------------------------------------------------------------------
    # rules (storage side; evaluation lives in hgdesk.ctm.rules)
    # ------------------------------------------------------------------

    def define_rule(
        self,
        study_id: str,
        trigger: Mapping[str, Any],
        predicate: Mapping[str, Any],
        action: Mapping[str, Any],
        active: bool = True,
    ) -> Rule:
        self.store.get_study(study_id)
        rule = Rule(
            rule_id=new_id("rule"),
            study_id=study_id,
            trigger=dict(trigger),
            predicate=dict(predicate),
            action=dict(action),
            active=active,
            created_at=self.clock.now_ms(),
        )
        cohorts = {c.cohort_id: c for c in self.store.list_cohorts(study_id)}
        testsets = {t.testset_id: t for t in self.store.list_testsets(study_id)}
        violations = validate_entity(rule, cohorts=cohorts, testsets=testsets)
        if violations:
            raise ValidationFailed.from_violations(violations)
        self.store.put_rule(rule)
        return rule


def _attribute_matches(subject: Subject, predicate: Mapping[str, Any]) -> bool:
    value = subject.attributes.get(predicate["attribute"])
    if value is None:
        return False
    target = predicate["value"]
    comparator = predicate["comparator"]
    if comparator == "==":
        return bool(value == target)
    both_numeric = (
        isinstance(value, (int, float))
        and not isinstance(value, bool)
        and isinstance(target, (int, float))
        and not isinstance(target, bool)
    )
    both_text = isinstance(value, str) and isinstance(target, str)
    if not (both_numeric or both_text):
        return False
    if comparator == "<":
        return value < target
    if comparator == "<=":
        return value <= target
    if comparator == ">":
        return value > target
    if comparator == ">=":
        return value >= target
    return False
