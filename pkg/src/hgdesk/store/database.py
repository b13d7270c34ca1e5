"""Embedded relational store on sqlite3.

One connection, WAL mode, a process-wide re-entrant lock around write
transactions.  Desk-scale deliberately trades parallel writes for
linearizability: every mutation runs inside ``with db.tx():`` and sees a
consistent snapshot.  Tables mirror the domain types one-to-one.
"""
from __future__ import annotations

import sqlite3
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

__all__ = ["Database"]

_SCHEMA = """
CREATE TABLE IF NOT EXISTS studies (
    study_id   TEXT PRIMARY KEY,
    name       TEXT NOT NULL UNIQUE,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS subjects (
    subject_id TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL REFERENCES studies(study_id),
    attributes TEXT NOT NULL DEFAULT '{}',
    device_id  TEXT UNIQUE,
    created_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS subjects_study ON subjects(study_id);
CREATE TABLE IF NOT EXISTS cohorts (
    cohort_id  TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    name       TEXT NOT NULL,
    origin     TEXT NOT NULL DEFAULT '{"type":"manual"}',
    created_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS cohorts_study ON cohorts(study_id);
CREATE TABLE IF NOT EXISTS cohort_members (
    cohort_id  TEXT NOT NULL,
    subject_id TEXT NOT NULL,
    PRIMARY KEY (cohort_id, subject_id)
);
CREATE TABLE IF NOT EXISTS testsets (
    testset_id TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    name       TEXT NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS testsets_study ON testsets(study_id);
CREATE TABLE IF NOT EXISTS tests (
    test_id    TEXT PRIMARY KEY,
    testset_id TEXT NOT NULL,
    study_id   TEXT NOT NULL,
    kind       TEXT NOT NULL,
    params     TEXT NOT NULL DEFAULT '{}',
    position   INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS tests_testset ON tests(testset_id);
CREATE TABLE IF NOT EXISTS tasks (
    task_id    TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    testset_id TEXT NOT NULL,
    cohort_id  TEXT NOT NULL,
    schedule   TEXT NOT NULL,
    created_by TEXT NOT NULL DEFAULT '{"type":"manual"}',
    created_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_study ON tasks(study_id);
CREATE TABLE IF NOT EXISTS occurrences (
    occurrence_id   TEXT PRIMARY KEY,
    task_id         TEXT NOT NULL,
    study_id        TEXT NOT NULL,
    subject_id      TEXT NOT NULL,
    slot            TEXT NOT NULL,
    window_start_ms INTEGER NOT NULL,
    window_end_ms   INTEGER NOT NULL,
    status          TEXT NOT NULL DEFAULT 'pending',
    UNIQUE (task_id, subject_id, slot)
);
CREATE INDEX IF NOT EXISTS occurrences_subject ON occurrences(subject_id, status);
CREATE INDEX IF NOT EXISTS occurrences_study ON occurrences(study_id, status);
CREATE TABLE IF NOT EXISTS datapoints (
    datapoint_id    TEXT PRIMARY KEY,
    study_id        TEXT NOT NULL,
    subject_id      TEXT NOT NULL,
    occurrence_id   TEXT NOT NULL,
    test_id         TEXT NOT NULL,
    payload         TEXT NOT NULL,
    collected_at    INTEGER NOT NULL,
    uploaded_at     INTEGER NOT NULL,
    idempotency_key TEXT NOT NULL,
    late            INTEGER NOT NULL DEFAULT 0,
    dataset_id      TEXT NOT NULL,
    position        INTEGER NOT NULL,
    UNIQUE (occurrence_id, test_id, idempotency_key)
);
CREATE INDEX IF NOT EXISTS datapoints_dataset ON datapoints(dataset_id, position);
CREATE INDEX IF NOT EXISTS datapoints_study ON datapoints(study_id);
CREATE TABLE IF NOT EXISTS datasets (
    dataset_id TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    testset_id TEXT NOT NULL,
    test_id    TEXT NOT NULL,
    day        TEXT NOT NULL,
    status     TEXT NOT NULL DEFAULT 'open',
    UNIQUE (study_id, test_id, day)
);
CREATE INDEX IF NOT EXISTS datasets_status ON datasets(status, day);
CREATE TABLE IF NOT EXISTS results (
    result_id    TEXT PRIMARY KEY,
    study_id     TEXT NOT NULL,
    dataset_id   TEXT NOT NULL,
    datapoint_id TEXT NOT NULL,
    subject_id   TEXT NOT NULL,
    worker_kind  TEXT NOT NULL,
    produced_at  INTEGER NOT NULL,
    body         TEXT NOT NULL,
    UNIQUE (datapoint_id, worker_kind)
);
CREATE INDEX IF NOT EXISTS results_study_time ON results(study_id, produced_at);
CREATE TABLE IF NOT EXISTS jobs (
    job_id           TEXT PRIMARY KEY,
    dataset_id       TEXT NOT NULL,
    worker_kind      TEXT NOT NULL,
    state            TEXT NOT NULL DEFAULT 'ready',
    attempts         INTEGER NOT NULL DEFAULT 0,
    max_retries      INTEGER NOT NULL DEFAULT 3,
    enqueued_at      INTEGER NOT NULL,
    lease_expires_at INTEGER,
    last_error       TEXT,
    seq              INTEGER NOT NULL
);
CREATE UNIQUE INDEX IF NOT EXISTS jobs_active
    ON jobs(dataset_id, worker_kind) WHERE state IN ('ready', 'leased');
CREATE INDEX IF NOT EXISTS jobs_claim ON jobs(worker_kind, state, enqueued_at, seq);
CREATE TABLE IF NOT EXISTS rules (
    rule_id    TEXT PRIMARY KEY,
    study_id   TEXT NOT NULL,
    trigger    TEXT NOT NULL,
    predicate  TEXT NOT NULL,
    action     TEXT NOT NULL,
    active     INTEGER NOT NULL DEFAULT 1,
    created_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS rules_study ON rules(study_id);
CREATE TABLE IF NOT EXISTS rule_runs (
    rule_id      TEXT NOT NULL,
    day          TEXT NOT NULL,
    cohort_id    TEXT,
    task_id      TEXT,
    detail       TEXT,
    evaluated_at INTEGER NOT NULL,
    PRIMARY KEY (rule_id, day)
);
CREATE TABLE IF NOT EXISTS credentials (
    token_hash TEXT PRIMARY KEY,
    role       TEXT NOT NULL,
    study_id   TEXT,
    subject_id TEXT,
    device_id  TEXT,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS vault (
    study_id  TEXT NOT NULL,
    raw_id    TEXT NOT NULL,
    pseudonym TEXT NOT NULL,
    PRIMARY KEY (study_id, raw_id)
);
CREATE TABLE IF NOT EXISTS objects (
    sha256     TEXT PRIMARY KEY,
    size_bytes INTEGER NOT NULL,
    media_type TEXT NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
"""


class Database:
    """Thread-safe sqlite handle with a single write lock."""

    def __init__(self, path: str | Path = ":memory:") -> None:
        self.path = str(path)
        if self.path != ":memory:":
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._lock = threading.RLock()
        with self._lock:
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA foreign_keys=ON")
            self._conn.executescript(_SCHEMA)
            self._conn.commit()

    @contextmanager
    def tx(self) -> Iterator[sqlite3.Connection]:
        """Serialized read-modify-write transaction."""
        with self._lock:
            try:
                yield self._conn
                self._conn.commit()
            except BaseException:
                self._conn.rollback()
                raise

    def query(self, sql: str, params: tuple = ()) -> list[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, params).fetchall()

    def query_one(self, sql: str, params: tuple = ()) -> sqlite3.Row | None:
        with self._lock:
            return self._conn.execute(sql, params).fetchone()

    def scalar(self, sql: str, params: tuple = ()) -> Any:
        row = self.query_one(sql, params)
        return None if row is None else row[0]

    # -- meta key/value -------------------------------------------------

    def get_meta(self, key: str) -> str | None:
        return self.scalar("SELECT value FROM meta WHERE key = ?", (key,))

    def set_meta(self, key: str, value: str) -> None:
        with self.tx() as conn:
            conn.execute(
                "INSERT INTO meta (key, value) VALUES (?, ?) "
                "ON CONFLICT(key) DO UPDATE SET value = excluded.value",
                (key, value),
            )

    def close(self) -> None:
        with self._lock:
            self._conn.close()
