"""Datastore facade: entities, uploads, datasets, results, credentials.

All mutations run inside one serialized sqlite transaction, which is what
makes ingest idempotency, exactly-once dataset publishing, and the
result-uniqueness guarantee cheap to enforce.
"""
from __future__ import annotations

import json
import secrets
import hashlib
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from hgdesk.clock import Clock, SystemClock
from hgdesk.dataprep.pseudo import pseudonym_for
from hgdesk.domain.entities import (
    AnalyticResult,
    Cohort,
    Datapoint,
    Dataset,
    DatasetStatus,
    ObjectRef,
    OccurrenceStatus,
    OCCURRENCE_TRANSITIONS,
    Payload,
    Rule,
    Schedule,
    Study,
    Subject,
    Task,
    TaskOccurrence,
    Test,
    TestSet,
)
from hgdesk.domain.ids import new_id
from hgdesk.domain.timefmt import day_of_ms
from hgdesk.errors import Conflict, NotFound, SchemaMismatch
from hgdesk.store.database import Database
from hgdesk.store.objects import ObjectStore
from hgdesk.store.payloads import EXPECTED_PAYLOAD_KIND, validate_for_kind

__all__ = ["Datastore", "UploadEnvelope", "Credential"]


@dataclass(frozen=True)
class UploadEnvelope:
    """One device upload: exactly one test result for one occurrence."""

    occurrence_id: str
    test_id: str
    idempotency_key: str
    collected_at: int  # device-side completion time, epoch ms
    payload_kind: str  # "text" | "file"
    content: str | bytes
    media_type: str = "application/json"


@dataclass(frozen=True)
class Credential:
    role: str  # "researcher" | "device" | "worker"
    study_id: str | None = None
    subject_id: str | None = None
    device_id: str | None = None


def _hash_token(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


class Datastore:
    def __init__(self, db: Database, objects: ObjectStore, clock: Clock | None = None) -> None:
        self.db = db
        self.objects = objects
        self.clock = clock or SystemClock()

    # ------------------------------------------------------------------
    # studies
    # ------------------------------------------------------------------

    def create_study(self, name: str) -> Study:
        study = Study(study_id=new_id("study"), name=name, created_at=self.clock.now_ms())
        with self.db.tx() as conn:
            existing = conn.execute(
                "SELECT study_id FROM studies WHERE name = ?", (name,)
            ).fetchone()
            if existing:
                raise Conflict(f"study named {name!r} already exists")
            conn.execute(
                "INSERT INTO studies (study_id, name, created_at) VALUES (?, ?, ?)",
                (study.study_id, study.name, study.created_at),
            )
        return study

    def get_study(self, study_id: str) -> Study:
        row = self.db.query_one("SELECT * FROM studies WHERE study_id = ?", (study_id,))
        if row is None:
            raise NotFound(f"study {study_id} not found")
        return Study(study_id=row["study_id"], name=row["name"], created_at=row["created_at"])

    def get_study_by_name(self, name: str) -> Study | None:
        row = self.db.query_one("SELECT * FROM studies WHERE name = ?", (name,))
        if row is None:
            return None
        return Study(study_id=row["study_id"], name=row["name"], created_at=row["created_at"])

    # ------------------------------------------------------------------
    # subjects
    # ------------------------------------------------------------------

    def put_subject(self, subject: Subject) -> None:
        with self.db.tx() as conn:
            conn.execute(
                "INSERT INTO subjects (subject_id, study_id, attributes, device_id, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (
                    subject.subject_id,
                    subject.study_id,
                    json.dumps(dict(subject.attributes), sort_keys=True),
                    subject.device_id,
                    subject.created_at,
                ),
            )

    def _subject_from_row(self, row) -> Subject:
        return Subject(
            subject_id=row["subject_id"],
            study_id=row["study_id"],
            attributes=json.loads(row["attributes"]),
            device_id=row["device_id"],
            created_at=row["created_at"],
        )

    def get_subject(self, subject_id: str) -> Subject:
        row = self.db.query_one("SELECT * FROM subjects WHERE subject_id = ?", (subject_id,))
        if row is None:
            raise NotFound(f"subject {subject_id} not found")
        return self._subject_from_row(row)

    def find_subject(self, subject_id: str) -> Subject | None:
        row = self.db.query_one("SELECT * FROM subjects WHERE subject_id = ?", (subject_id,))
        return None if row is None else self._subject_from_row(row)

    def get_subject_by_device(self, device_id: str) -> Subject | None:
        row = self.db.query_one("SELECT * FROM subjects WHERE device_id = ?", (device_id,))
        return None if row is None else self._subject_from_row(row)

    def list_subjects(self, study_id: str) -> list[Subject]:
        rows = self.db.query(
            "SELECT * FROM subjects WHERE study_id = ? ORDER BY created_at, subject_id",
            (study_id,),
        )
        return [self._subject_from_row(r) for r in rows]

    # ------------------------------------------------------------------
    # cohorts
    # ------------------------------------------------------------------

    def put_cohort(self, cohort: Cohort) -> None:
        with self.db.tx() as conn:
            conn.execute(
                "INSERT INTO cohorts (cohort_id, study_id, name, origin, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (
                    cohort.cohort_id,
                    cohort.study_id,
                    cohort.name,
                    json.dumps(dict(cohort.origin), sort_keys=True),
                    cohort.created_at,
                ),
            )
            conn.executemany(
                "INSERT INTO cohort_members (cohort_id, subject_id) VALUES (?, ?)",
                [(cohort.cohort_id, sid) for sid in sorted(set(cohort.member_ids))],
            )

    def _cohort_from_row(self, row) -> Cohort:
        members = self.db.query(
            "SELECT subject_id FROM cohort_members WHERE cohort_id = ? ORDER BY subject_id",
            (row["cohort_id"],),
        )
        return Cohort(
            cohort_id=row["cohort_id"],
            study_id=row["study_id"],
            name=row["name"],
            member_ids=tuple(m["subject_id"] for m in members),
            origin=json.loads(row["origin"]),
            created_at=row["created_at"],
        )

    def get_cohort(self, cohort_id: str) -> Cohort:
        row = self.db.query_one("SELECT * FROM cohorts WHERE cohort_id = ?", (cohort_id,))
        if row is None:
            raise NotFound(f"cohort {cohort_id} not found")
        return self._cohort_from_row(row)

    def find_cohort(self, cohort_id: str) -> Cohort | None:
        row = self.db.query_one("SELECT * FROM cohorts WHERE cohort_id = ?", (cohort_id,))
        return None if row is None else self._cohort_from_row(row)

    def list_cohorts(self, study_id: str) -> list[Cohort]:
        rows = self.db.query(
            "SELECT * FROM cohorts WHERE study_id = ? ORDER BY created_at, cohort_id",
            (study_id,),
        )
        return [self._cohort_from_row(r) for r in rows]

    # ------------------------------------------------------------------
    # test-sets
    # ------------------------------------------------------------------

    def put_testset(self, testset: TestSet) -> None:
        with self.db.tx() as conn:
            conn.execute(
                "INSERT INTO testsets (testset_id, study_id, name, created_at)"
                " VALUES (?, ?, ?, ?)",
                (testset.testset_id, testset.study_id, testset.name, testset.created_at),
            )
            conn.executemany(
                "INSERT INTO tests (test_id, testset_id, study_id, kind, params, position)"
                " VALUES (?, ?, ?, ?, ?, ?)",
                [
                    (
                        t.test_id,
                        testset.testset_id,
                        testset.study_id,
                        t.kind,
                        json.dumps(dict(t.params), sort_keys=True),
                        i,
                    )
                    for i, t in enumerate(testset.tests)
                ],
            )

    def _testset_from_row(self, row) -> TestSet:
        tests = self.db.query(
            "SELECT * FROM tests WHERE testset_id = ? ORDER BY position", (row["testset_id"],)
        )
        return TestSet(
            testset_id=row["testset_id"],
            study_id=row["study_id"],
            name=row["name"],
            tests=tuple(
                Test(test_id=t["test_id"], kind=t["kind"], params=json.loads(t["params"]))
                for t in tests
            ),
            created_at=row["created_at"],
        )

    def get_testset(self, testset_id: str) -> TestSet:
        row = self.db.query_one("SELECT * FROM testsets WHERE testset_id = ?", (testset_id,))
        if row is None:
            raise NotFound(f"test-set {testset_id} not found")
        return self._testset_from_row(row)

    def find_testset(self, testset_id: str) -> TestSet | None:
        row = self.db.query_one("SELECT * FROM testsets WHERE testset_id = ?", (testset_id,))
        return None if row is None else self._testset_from_row(row)

    def list_testsets(self, study_id: str) -> list[TestSet]:
        rows = self.db.query(
            "SELECT * FROM testsets WHERE study_id = ? ORDER BY created_at, testset_id",
            (study_id,),
        )
        return [self._testset_from_row(r) for r in rows]

    def get_test(self, test_id: str) -> tuple[Test, str, str]:
        """Return (test, testset_id, study_id)."""
        row = self.db.query_one("SELECT * FROM tests WHERE test_id = ?", (test_id,))
        if row is None:
            raise NotFound(f"test {test_id} not found")
        test = Test(test_id=row["test_id"], kind=row["kind"], params=json.loads(row["params"]))
        return test, row["testset_id"], row["study_id"]

    # ------------------------------------------------------------------
    # tasks + occurrences
    # ------------------------------------------------------------------

    def put_task(self, task: Task) -> None:
        with self.db.tx() as conn:
            conn.execute(
                "INSERT INTO tasks (task_id, study_id, testset_id, cohort_id, schedule,"
                " created_by, created_at) VALUES (?, ?, ?, ?, ?, ?, ?)",
                (
                    task.task_id,
                    task.study_id,
                    task.testset_id,
                    task.cohort_id,
                    json.dumps(task.schedule.to_doc(), sort_keys=True),
                    json.dumps(dict(task.created_by), sort_keys=True),
                    task.created_at,
                ),
            )

    def _task_from_row(self, row) -> Task:
        return Task(
            task_id=row["task_id"],
            study_id=row["study_id"],
            testset_id=row["testset_id"],
            cohort_id=row["cohort_id"],
            schedule=Schedule.from_doc(json.loads(row["schedule"])),
            created_by=json.loads(row["created_by"]),
            created_at=row["created_at"],
        )

    def get_task(self, task_id: str) -> Task:
        row = self.db.query_one("SELECT * FROM tasks WHERE task_id = ?", (task_id,))
        if row is None:
            raise NotFound(f"task {task_id} not found")
        return self._task_from_row(row)

    def list_tasks(self, study_id: str | None = None) -> list[Task]:
        if study_id is None:
            rows = self.db.query("SELECT * FROM tasks ORDER BY created_at, task_id")
        else:
            rows = self.db.query(
                "SELECT * FROM tasks WHERE study_id = ? ORDER BY created_at, task_id",
                (study_id,),
            )
        return [self._task_from_row(r) for r in rows]

    def put_occurrence(self, occ: TaskOccurrence) -> bool:
        """Insert if the (task, subject, slot) is new; returns created flag."""
        with self.db.tx() as conn:
            cur = conn.execute(
                "INSERT OR IGNORE INTO occurrences (occurrence_id, task_id, study_id,"
                " subject_id, slot, window_start_ms, window_end_ms, status)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    occ.occurrence_id,
                    occ.task_id,
                    occ.study_id,
                    occ.subject_id,
                    occ.slot,
                    occ.window_start_ms,
                    occ.window_end_ms,
                    occ.status,
                ),
            )
            return cur.rowcount == 1

    def _occurrence_from_row(self, row) -> TaskOccurrence:
        return TaskOccurrence(
            occurrence_id=row["occurrence_id"],
            task_id=row["task_id"],
            study_id=row["study_id"],
            subject_id=row["subject_id"],
            slot=row["slot"],
            window_start_ms=row["window_start_ms"],
            window_end_ms=row["window_end_ms"],
            status=row["status"],
        )

    def get_occurrence(self, occurrence_id: str) -> TaskOccurrence:
        row = self.db.query_one(
            "SELECT * FROM occurrences WHERE occurrence_id = ?", (occurrence_id,)
        )
        if row is None:
            raise NotFound(f"occurrence {occurrence_id} not found")
        return self._occurrence_from_row(row)

    def list_occurrences(
        self,
        *,
        study_id: str | None = None,
        task_id: str | None = None,
        subject_id: str | None = None,
        status: Sequence[str] | None = None,
    ) -> list[TaskOccurrence]:
        clauses, params = [], []
        if study_id is not None:
            clauses.append("study_id = ?")
            params.append(study_id)
        if task_id is not None:
            clauses.append("task_id = ?")
            params.append(task_id)
        if subject_id is not None:
            clauses.append("subject_id = ?")
            params.append(subject_id)
        if status:
            clauses.append(f"status IN ({','.join('?' * len(status))})")
            params.extend(status)
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        rows = self.db.query(
            f"SELECT * FROM occurrences{where} ORDER BY slot, occurrence_id", tuple(params)
        )
        return [self._occurrence_from_row(r) for r in rows]

    def due_occurrences(self, subject_id: str, now_ms: int) -> list[TaskOccurrence]:
        """Deliverable occurrences: inside [window_start, window_end), not terminal."""
        rows = self.db.query(
            "SELECT * FROM occurrences WHERE subject_id = ? AND status IN ('pending', 'delivered')"
            " AND window_start_ms <= ? AND ? < window_end_ms ORDER BY window_start_ms,"
            " occurrence_id",
            (subject_id, now_ms, now_ms),
        )
        return [self._occurrence_from_row(r) for r in rows]

    def transition_occurrence(self, occurrence_id: str, new_status: str) -> TaskOccurrence:
        """Advance an occurrence through its monotone lifecycle."""
        with self.db.tx() as conn:
            row = conn.execute(
                "SELECT * FROM occurrences WHERE occurrence_id = ?", (occurrence_id,)
            ).fetchone()
            if row is None:
                raise NotFound(f"occurrence {occurrence_id} not found")
            current = row["status"]
            if current == new_status:
                return self._occurrence_from_row(row)
            if new_status not in OCCURRENCE_TRANSITIONS.get(current, frozenset()):
                raise Conflict(f"illegal occurrence transition {current} -> {new_status}")
            conn.execute(
                "UPDATE occurrences SET status = ? WHERE occurrence_id = ?",
                (new_status, occurrence_id),
            )
        return self.get_occurrence(occurrence_id)

    def expire_due_occurrences(self, now_ms: int) -> int:
        """Window-end sweep: pending/delivered occurrences past their window expire."""
        with self.db.tx() as conn:
            cur = conn.execute(
                "UPDATE occurrences SET status = 'expired' WHERE status IN"
                " ('pending', 'delivered') AND window_end_ms <= ?",
                (now_ms,),
            )
            return cur.rowcount

    # ------------------------------------------------------------------
    # ingest + datasets
    # ------------------------------------------------------------------

    def ingest(self, envelope: UploadEnvelope) -> tuple[Datapoint, bool]:
        """Accept one upload; returns (datapoint, created).

        Idempotent on (occurrence, test, idempotency_key).  Validates the
        content against the test kind's schema, writes file payloads to the
        object store, appends the datapoint to the open dataset of
        (study, test, current UTC day), and completes the occurrence.
        Uploads against an expired occurrence are accepted with late=true.
        """
        if not envelope.idempotency_key:
            raise SchemaMismatch("idempotency_key must be non-empty")
        occ = self.get_occurrence(envelope.occurrence_id)
        test, testset_id, test_study_id = self.get_test(envelope.test_id)
        if test_study_id != occ.study_id:
            raise SchemaMismatch("test does not belong to the occurrence's study")

        expected_kind = EXPECTED_PAYLOAD_KIND[test.kind]
        if envelope.payload_kind != expected_kind:
            raise SchemaMismatch(
                f"test kind {test.kind} expects a {expected_kind} payload,"
                f" got {envelope.payload_kind}"
            )
        validate_for_kind(test.kind, envelope.content)

        now = self.clock.now_ms()
        day = day_of_ms(now)
        late = occ.status == OccurrenceStatus.EXPIRED.value

        with self.db.tx() as conn:
            existing = conn.execute(
                "SELECT * FROM datapoints WHERE occurrence_id = ? AND test_id = ?"
                " AND idempotency_key = ?",
                (envelope.occurrence_id, envelope.test_id, envelope.idempotency_key),
            ).fetchone()
            if existing is not None:
                return self._datapoint_from_row(existing), False

            if envelope.payload_kind == "file":
                content = (
                    envelope.content
                    if isinstance(envelope.content, bytes)
                    else envelope.content.encode("utf-8")
                )
                ref = self.objects.put(content, media_type=envelope.media_type)
                conn.execute(
                    "INSERT OR IGNORE INTO objects (sha256, size_bytes, media_type, created_at)"
                    " VALUES (?, ?, ?, ?)",
                    (ref.sha256, ref.size_bytes, ref.media_type, now),
                )
                payload = Payload(kind="file", object_ref=ref)
            else:
                text = (
                    envelope.content
                    if isinstance(envelope.content, str)
                    else envelope.content.decode("utf-8")
                )
                payload = Payload(kind="text", value=text)

            dataset_id = self._open_dataset_in_tx(conn, occ.study_id, testset_id, test, day)
            position = conn.execute(
                "SELECT COUNT(*) FROM datapoints WHERE dataset_id = ?", (dataset_id,)
            ).fetchone()[0]
            dp = Datapoint(
                datapoint_id=new_id("datapoint"),
                study_id=occ.study_id,
                subject_id=occ.subject_id,
                occurrence_id=occ.occurrence_id,
                test_id=test.test_id,
                payload=payload,
                collected_at=envelope.collected_at,
                uploaded_at=now,
                idempotency_key=envelope.idempotency_key,
                late=late,
            )
            conn.execute(
                "INSERT INTO datapoints (datapoint_id, study_id, subject_id, occurrence_id,"
                " test_id, payload, collected_at, uploaded_at, idempotency_key, late,"
                " dataset_id, position) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    dp.datapoint_id,
                    dp.study_id,
                    dp.subject_id,
                    dp.occurrence_id,
                    dp.test_id,
                    json.dumps(payload.to_doc(), sort_keys=True),
                    dp.collected_at,
                    dp.uploaded_at,
                    dp.idempotency_key,
                    1 if late else 0,
                    dataset_id,
                    position,
                ),
            )
            if occ.status in ("pending", "delivered"):
                conn.execute(
                    "UPDATE occurrences SET status = 'completed' WHERE occurrence_id = ?"
                    " AND status IN ('pending', 'delivered')",
                    (occ.occurrence_id,),
                )
        return dp, True

    def _open_dataset_in_tx(self, conn, study_id: str, testset_id: str, test: Test, day: str) -> str:
        row = conn.execute(
            "SELECT dataset_id, status FROM datasets WHERE study_id = ? AND test_id = ?"
            " AND day = ?",
            (study_id, test.test_id, day),
        ).fetchone()
        if row is not None:
            if row["status"] != DatasetStatus.OPEN.value:
                # Only possible if something published the current day; the
                # publish sweep never does (it stops before today).
                raise Conflict(f"dataset for {day} is no longer open")
            return row["dataset_id"]
        dataset_id = new_id("dataset")
        conn.execute(
            "INSERT INTO datasets (dataset_id, study_id, testset_id, test_id, day, status)"
            " VALUES (?, ?, ?, ?, ?, 'open')",
            (dataset_id, study_id, testset_id, test.test_id, day),
        )
        return dataset_id

    def _datapoint_from_row(self, row) -> Datapoint:
        return Datapoint(
            datapoint_id=row["datapoint_id"],
            study_id=row["study_id"],
            subject_id=row["subject_id"],
            occurrence_id=row["occurrence_id"],
            test_id=row["test_id"],
            payload=Payload.from_doc(json.loads(row["payload"])),
            collected_at=row["collected_at"],
            uploaded_at=row["uploaded_at"],
            idempotency_key=row["idempotency_key"],
            late=bool(row["late"]),
        )

    def get_datapoint(self, datapoint_id: str) -> Datapoint:
        row = self.db.query_one(
            "SELECT * FROM datapoints WHERE datapoint_id = ?", (datapoint_id,)
        )
        if row is None:
            raise NotFound(f"datapoint {datapoint_id} not found")
        return self._datapoint_from_row(row)

    def list_datapoints(
        self, study_id: str | None = None, dataset_id: str | None = None
    ) -> list[Datapoint]:
        if dataset_id is not None:
            rows = self.db.query(
                "SELECT * FROM datapoints WHERE dataset_id = ? ORDER BY position", (dataset_id,)
            )
        elif study_id is not None:
            rows = self.db.query(
                "SELECT * FROM datapoints WHERE study_id = ? ORDER BY uploaded_at, datapoint_id",
                (study_id,),
            )
        else:
            rows = self.db.query("SELECT * FROM datapoints ORDER BY uploaded_at, datapoint_id")
        return [self._datapoint_from_row(r) for r in rows]

    def _dataset_from_row(self, row) -> Dataset:
        members = self.db.query(
            "SELECT datapoint_id FROM datapoints WHERE dataset_id = ? ORDER BY position",
            (row["dataset_id"],),
        )
        return Dataset(
            dataset_id=row["dataset_id"],
            study_id=row["study_id"],
            testset_id=row["testset_id"],
            test_id=row["test_id"],
            day=row["day"],
            datapoint_ids=tuple(m["datapoint_id"] for m in members),
            status=row["status"],
        )

    def get_dataset(self, dataset_id: str) -> Dataset:
        row = self.db.query_one("SELECT * FROM datasets WHERE dataset_id = ?", (dataset_id,))
        if row is None:
            raise NotFound(f"dataset {dataset_id} not found")
        return self._dataset_from_row(row)

    def list_datasets(
        self, study_id: str | None = None, status: str | None = None
    ) -> list[Dataset]:
        clauses, params = [], []
        if study_id is not None:
            clauses.append("study_id = ?")
            params.append(study_id)
        if status is not None:
            clauses.append("status = ?")
            params.append(status)
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        rows = self.db.query(f"SELECT * FROM datasets{where} ORDER BY day, dataset_id", tuple(params))
        return [self._dataset_from_row(r) for r in rows]

    def publish_datasets(self, now_ms: int) -> list[Dataset]:
        """Publish every open dataset whose UTC day has closed.

        Compare-and-set per dataset: only the caller whose UPDATE flips
        open -> published gets the dataset back, so double sweeps cannot
        double-publish.
        """
        today = day_of_ms(now_ms)
        published: list[Dataset] = []
        with self.db.tx() as conn:
            candidates = conn.execute(
                "SELECT dataset_id FROM datasets WHERE status = 'open' AND day < ?"
                " ORDER BY day, dataset_id",
                (today,),
            ).fetchall()
            for row in candidates:
                cur = conn.execute(
                    "UPDATE datasets SET status = 'published' WHERE dataset_id = ?"
                    " AND status = 'open'",
                    (row["dataset_id"],),
                )
                if cur.rowcount == 1:
                    published.append(row["dataset_id"])
        return [self.get_dataset(ds_id) for ds_id in published]

    def mark_dataset_processed(self, dataset_id: str) -> None:
        with self.db.tx() as conn:
            conn.execute(
                "UPDATE datasets SET status = 'processed' WHERE dataset_id = ?"
                " AND status = 'published'",
                (dataset_id,),
            )

    def get_object(self, digest: str) -> tuple[bytes, str]:
        """Object bytes + media type, digest-verified."""
        row = self.db.query_one("SELECT media_type FROM objects WHERE sha256 = ?", (digest,))
        media_type = row["media_type"] if row else "application/octet-stream"
        return self.objects.get(digest), media_type

    # ------------------------------------------------------------------
    # results
    # ------------------------------------------------------------------

    def upsert_result(
        self,
        *,
        datapoint_id: str,
        dataset_id: str,
        worker_kind: str,
        body: dict[str, Any],
        produced_at: int | None = None,
    ) -> AnalyticResult:
        """Store a result; exactly one row per (datapoint, worker_kind).

        Resubmission overwrites body and produced_at but keeps the row (and
        its result_id), so reprocessing never duplicates.
        """
        dp = self.get_datapoint(datapoint_id)
        now = produced_at if produced_at is not None else self.clock.now_ms()
        with self.db.tx() as conn:
            existing = conn.execute(
                "SELECT result_id FROM results WHERE datapoint_id = ? AND worker_kind = ?",
                (datapoint_id, worker_kind),
            ).fetchone()
            if existing is not None:
                conn.execute(
                    "UPDATE results SET body = ?, produced_at = ?, dataset_id = ?"
                    " WHERE result_id = ?",
                    (
                        json.dumps(body, sort_keys=True),
                        now,
                        dataset_id,
                        existing["result_id"],
                    ),
                )
                result_id = existing["result_id"]
            else:
                result_id = new_id("result")
                conn.execute(
                    "INSERT INTO results (result_id, study_id, dataset_id, datapoint_id,"
                    " subject_id, worker_kind, produced_at, body)"
                    " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                    (
                        result_id,
                        dp.study_id,
                        dataset_id,
                        datapoint_id,
                        dp.subject_id,
                        worker_kind,
                        now,
                        json.dumps(body, sort_keys=True),
                    ),
                )
            # the result closes the loop for the occurrence if ingest hasn't
            conn.execute(
                "UPDATE occurrences SET status = 'completed' WHERE occurrence_id = ?"
                " AND status IN ('pending', 'delivered')",
                (dp.occurrence_id,),
            )
        return self.get_result(result_id)

    def _result_from_row(self, row) -> AnalyticResult:
        return AnalyticResult(
            result_id=row["result_id"],
            study_id=row["study_id"],
            dataset_id=row["dataset_id"],
            datapoint_id=row["datapoint_id"],
            subject_id=row["subject_id"],
            worker_kind=row["worker_kind"],
            produced_at=row["produced_at"],
            body=json.loads(row["body"]),
        )

    def get_result(self, result_id: str) -> AnalyticResult:
        row = self.db.query_one("SELECT * FROM results WHERE result_id = ?", (result_id,))
        if row is None:
            raise NotFound(f"result {result_id} not found")
        return self._result_from_row(row)

    def query_results(
        self,
        study_id: str,
        *,
        subject_id: str | None = None,
        worker_kind: str | None = None,
        from_ms: int | None = None,
        to_ms: int | None = None,
    ) -> list[AnalyticResult]:
        """Results sorted ascending by produced_at (ties by result_id)."""
        clauses, params = ["study_id = ?"], [study_id]
        if subject_id is not None:
            clauses.append("subject_id = ?")
            params.append(subject_id)
        if worker_kind is not None:
            clauses.append("worker_kind = ?")
            params.append(worker_kind)
        if from_ms is not None:
            clauses.append("produced_at >= ?")
            params.append(from_ms)
        if to_ms is not None:
            clauses.append("produced_at < ?")
            params.append(to_ms)
        rows = self.db.query(
            f"SELECT * FROM results WHERE {' AND '.join(clauses)}"
            " ORDER BY produced_at, result_id",
            tuple(params),
        )
        return [self._result_from_row(r) for r in rows]

    # ------------------------------------------------------------------
    # rules
    # ------------------------------------------------------------------

    def put_rule(self, rule: Rule) -> None:
        with self.db.tx() as conn:
            conn.execute(
                "INSERT INTO rules (rule_id, study_id, trigger, predicate, action, active,"
                " created_at) VALUES (?, ?, ?, ?, ?, ?, ?)",
                (
                    rule.rule_id,
                    rule.study_id,
                    json.dumps(dict(rule.trigger), sort_keys=True),
                    json.dumps(dict(rule.predicate), sort_keys=True),
                    json.dumps(dict(rule.action), sort_keys=True),
                    1 if rule.active else 0,
                    rule.created_at,
                ),
            )

    def _rule_from_row(self, row) -> Rule:
        return Rule(
            rule_id=row["rule_id"],
            study_id=row["study_id"],
            trigger=json.loads(row["trigger"]),
            predicate=json.loads(row["predicate"]),
            action=json.loads(row["action"]),
            active=bool(row["active"]),
            created_at=row["created_at"],
        )

    def get_rule(self, rule_id: str) -> Rule:
        row = self.db.query_one("SELECT * FROM rules WHERE rule_id = ?", (rule_id,))
        if row is None:
            raise NotFound(f"rule {rule_id} not found")
        return self._rule_from_row(row)

    def list_rules(self, study_id: str | None = None, active_only: bool = False) -> list[Rule]:
        clauses, params = [], []
        if study_id is not None:
            clauses.append("study_id = ?")
            params.append(study_id)
        if active_only:
            clauses.append("active = 1")
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        rows = self.db.query(
            f"SELECT * FROM rules{where} ORDER BY created_at, rule_id", tuple(params)
        )
        return [self._rule_from_row(r) for r in rows]

    def record_rule_run(
        self,
        rule_id: str,
        day: str,
        cohort_id: str | None,
        task_id: str | None,
        detail: Mapping[str, Any] | None = None,
    ) -> bool:
        """Mark (rule, day) evaluated; returns False if it already was."""
        with self.db.tx() as conn:
            cur = conn.execute(
                "INSERT OR IGNORE INTO rule_runs (rule_id, day, cohort_id, task_id,"
                " detail, evaluated_at) VALUES (?, ?, ?, ?, ?, ?)",
                (
                    rule_id,
                    day,
                    cohort_id,
                    task_id,
                    json.dumps(detail, sort_keys=True) if detail is not None else None,
                    self.clock.now_ms(),
                ),
            )
            return cur.rowcount == 1

    def max_window_end(self, study_id: str, slot: str) -> int | None:
        """Latest occurrence window end for one study's calendar day."""
        return self.db.scalar(
            "SELECT MAX(window_end_ms) FROM occurrences WHERE study_id = ? AND slot = ?",
            (study_id, slot),
        )

    def get_rule_run(self, rule_id: str, day: str):
        return self.db.query_one(
            "SELECT * FROM rule_runs WHERE rule_id = ? AND day = ?", (rule_id, day)
        )

    def list_rule_runs(self, rule_id: str):
        return self.db.query(
            "SELECT * FROM rule_runs WHERE rule_id = ? ORDER BY day", (rule_id,)
        )

    # ------------------------------------------------------------------
    # credentials + vault
    # ------------------------------------------------------------------

    def mint_credential(
        self,
        role: str,
        *,
        study_id: str | None = None,
        subject_id: str | None = None,
        device_id: str | None = None,
    ) -> str:
        """Create a bearer token (returned once; only its hash is stored)."""
        if role not in ("researcher", "device", "worker"):
            raise ValueError(f"unknown role {role!r}")
        token = f"hgt_{secrets.token_urlsafe(32)}"
        with self.db.tx() as conn:
            conn.execute(
                "INSERT INTO credentials (token_hash, role, study_id, subject_id, device_id,"
                " created_at) VALUES (?, ?, ?, ?, ?, ?)",
                (_hash_token(token), role, study_id, subject_id, device_id, self.clock.now_ms()),
            )
        return token

    def resolve_credential(self, token: str) -> Credential | None:
        row = self.db.query_one(
            "SELECT * FROM credentials WHERE token_hash = ?", (_hash_token(token),)
        )
        if row is None:
            return None
        return Credential(
            role=row["role"],
            study_id=row["study_id"],
            subject_id=row["subject_id"],
            device_id=row["device_id"],
        )

    def study_salt(self, study_id: str) -> bytes:
        key = f"pseudonym_salt:{study_id}"
        existing = self.db.get_meta(key)
        if existing is not None:
            return bytes.fromhex(existing)
        salt = secrets.token_bytes(32)
        self.db.set_meta(key, salt.hex())
        return salt

    def pseudonymize(self, study_id: str, raw_id: str) -> str:
        """Stable pseudonym for a raw id; records the mapping in the vault."""
        pseudonym = pseudonym_for(self.study_salt(study_id), raw_id)
        with self.db.tx() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO vault (study_id, raw_id, pseudonym) VALUES (?, ?, ?)",
                (study_id, raw_id, pseudonym),
            )
        return pseudonym

    def vault_rows(self, study_id: str) -> list[tuple[str, str]]:
        rows = self.db.query(
            "SELECT raw_id, pseudonym FROM vault WHERE study_id = ? ORDER BY raw_id",
            (study_id,),
        )
        return [(r["raw_id"], r["pseudonym"]) for r in rows]
