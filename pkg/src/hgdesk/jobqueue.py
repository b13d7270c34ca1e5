"""Lease-based job queue with at-least-once delivery.

Jobs route published datasets to analytic workers.  A claim leases the
oldest ready job of a kind for a bounded time; the lease token is
(job_id, attempts), so once a lease expires and the job is claimed again,
the previous holder's ack no longer matches and is rejected as stale.
States: ready -> leased -> done | dead (failed jobs go back to ready until
their attempts are exhausted).

The queue lives in the same sqlite database as everything else; every
operation is one serialized transaction, which is what makes claim atomic
under concurrent workers.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Final

from hgdesk.clock import Clock, SystemClock
from hgdesk.domain.ids import new_id
from hgdesk.errors import NotFound, StaleLease
from hgdesk.store.database import Database

__all__ = ["Job", "Lease", "JobQueue", "DEFAULT_LEASE_SECS", "DEFAULT_MAX_RETRIES"]

DEFAULT_LEASE_SECS: Final[int] = 60
DEFAULT_MAX_RETRIES: Final[int] = 3

_ACTIVE_STATES = ("ready", "leased")


@dataclass(frozen=True)
class Job:
    job_id: str
    dataset_id: str
    worker_kind: str
    state: str
    attempts: int
    max_retries: int
    enqueued_at: int
    lease_expires_at: int | None = None
    last_error: str | None = None

    def to_doc(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "dataset_id": self.dataset_id,
            "worker_kind": self.worker_kind,
            "state": self.state,
            "attempts": self.attempts,
            "max_retries": self.max_retries,
        }


@dataclass(frozen=True)
class Lease:
    """Claim receipt; ``attempts`` is the fencing token for the ack."""

    job: Job
    attempts: int
    lease_expires_at: int


class JobQueue:
    def __init__(
        self,
        db: Database,
        clock: Clock | None = None,
        max_retries: int = DEFAULT_MAX_RETRIES,
        record_events: bool = False,
    ) -> None:
        self.db = db
        self.clock = clock or SystemClock()
        self.max_retries = max_retries
        self.events: list[dict[str, Any]] = []
        self._record = record_events
        self._events_lock = threading.Lock()

    def _event(self, kind: str, **fields: Any) -> None:
        if self._record:
            with self._events_lock:
                self.events.append({"event": kind, "t": self.clock.now_ms(), **fields})

    @staticmethod
    def _job_from_row(row) -> Job:
        return Job(
            job_id=row["job_id"],
            dataset_id=row["dataset_id"],
            worker_kind=row["worker_kind"],
            state=row["state"],
            attempts=row["attempts"],
            max_retries=row["max_retries"],
            enqueued_at=row["enqueued_at"],
            lease_expires_at=row["lease_expires_at"],
            last_error=row["last_error"],
        )

    # ------------------------------------------------------------------

    def enqueue(self, dataset_id: str, worker_kind: str) -> tuple[Job, bool]:
        """Add a job; idempotent while a non-terminal job for the same
        (dataset, kind) exists.  A done/dead predecessor allows a fresh job.
        """
        now = self.clock.now_ms()
        with self.db.tx() as conn:
            existing = conn.execute(
                "SELECT * FROM jobs WHERE dataset_id = ? AND worker_kind = ?"
                " AND state IN ('ready', 'leased')",
                (dataset_id, worker_kind),
            ).fetchone()
            if existing is not None:
                return self._job_from_row(existing), False
            seq = conn.execute("SELECT COALESCE(MAX(seq), 0) + 1 FROM jobs").fetchone()[0]
            job_id = new_id("job")
            conn.execute(
                "INSERT INTO jobs (job_id, dataset_id, worker_kind, state, attempts,"
                " max_retries, enqueued_at, seq) VALUES (?, ?, ?, 'ready', 0, ?, ?, ?)",
                (job_id, dataset_id, worker_kind, self.max_retries, now, seq),
            )
        self._event("enqueue", job_id=job_id, dataset_id=dataset_id, worker_kind=worker_kind)
        return self.get_job(job_id), True

    def claim(self, worker_kind: str, lease_secs: int = DEFAULT_LEASE_SECS) -> Lease | None:
        """Lease the oldest ready job of ``worker_kind``; None when idle.

        Expired leases of this kind are swept first, so redelivery needs no
        background process.
        """
        now = self.clock.now_ms()
        with self.db.tx() as conn:
            self._sweep_expired_in_tx(conn, now, worker_kind)
            row = conn.execute(
                "SELECT * FROM jobs WHERE worker_kind = ? AND state = 'ready'"
                " ORDER BY enqueued_at, seq LIMIT 1",
                (worker_kind,),
            ).fetchone()
            if row is None:
                return None
            attempts = row["attempts"] + 1
            expires = now + lease_secs * 1000
            cur = conn.execute(
                "UPDATE jobs SET state = 'leased', attempts = ?, lease_expires_at = ?"
                " WHERE job_id = ? AND state = 'ready'",
                (attempts, expires, row["job_id"]),
            )
            if cur.rowcount != 1:  # pragma: no cover - guarded by the tx lock
                return None
        self._event("claim", job_id=row["job_id"], attempts=attempts, lease_expires_at=expires)
        job = self.get_job(row["job_id"])
        return Lease(job=job, attempts=attempts, lease_expires_at=expires)

    def ack(
        self, job_id: str, lease_attempts: int, outcome: str, reason: str | None = None
    ) -> str:
        """Settle a leased job; returns the job's final state.

        The ack is honored only while (job_id, attempts) still matches the
        caller's lease; anything else raises STALE_LEASE.  A repeated
        success ack for an already-done attempt is accepted (idempotent).
        """
        if outcome not in ("success", "failure"):
            raise ValueError(f"bad outcome {outcome!r}")
        now = self.clock.now_ms()
        with self.db.tx() as conn:
            row = conn.execute("SELECT * FROM jobs WHERE job_id = ?", (job_id,)).fetchone()
            if row is None:
                raise NotFound(f"job {job_id} not found")
            if (
                outcome == "success"
                and row["state"] == "done"
                and row["attempts"] == lease_attempts
            ):
                return "done"
            if row["state"] != "leased" or row["attempts"] != lease_attempts:
                raise StaleLease(
                    f"lease (job={job_id}, attempts={lease_attempts}) is no longer valid"
                )
            if outcome == "success":
                state = "done"
                conn.execute(
                    "UPDATE jobs SET state = 'done', lease_expires_at = NULL WHERE job_id = ?",
                    (job_id,),
                )
                conn.execute(
                    "UPDATE datasets SET status = 'processed' WHERE dataset_id = ?"
                    " AND status = 'published'",
                    (row["dataset_id"],),
                )
            else:
                exhausted = row["attempts"] > row["max_retries"]
                state = "dead" if exhausted else "ready"
                conn.execute(
                    "UPDATE jobs SET state = ?, lease_expires_at = NULL, last_error = ?"
                    " WHERE job_id = ?",
                    (state, reason or "failure", job_id),
                )
        self._event("ack", job_id=job_id, attempts=lease_attempts, outcome=outcome, state=state, t_ack=now)
        return state

    def _sweep_expired_in_tx(self, conn, now: int, worker_kind: str | None = None) -> tuple[int, int]:
        clause, params = "", []
        if worker_kind is not None:
            clause = " AND worker_kind = ?"
            params.append(worker_kind)
        rows = conn.execute(
            f"SELECT * FROM jobs WHERE state = 'leased' AND lease_expires_at <= ?{clause}",
            (now, *params),
        ).fetchall()
        requeued = deadened = 0
        for row in rows:
            if row["attempts"] > row["max_retries"]:
                conn.execute(
                    "UPDATE jobs SET state = 'dead', lease_expires_at = NULL,"
                    " last_error = 'lease expired; attempts exhausted'"
                    " WHERE job_id = ? AND state = 'leased' AND lease_expires_at <= ?",
                    (row["job_id"], now),
                )
                deadened += 1
                self._event("lease_expired_dead", job_id=row["job_id"], attempts=row["attempts"])
            else:
                conn.execute(
                    "UPDATE jobs SET state = 'ready', lease_expires_at = NULL"
                    " WHERE job_id = ? AND state = 'leased' AND lease_expires_at <= ?",
                    (row["job_id"], now),
                )
                requeued += 1
                self._event("lease_expired", job_id=row["job_id"], attempts=row["attempts"])
        return requeued, deadened

    def requeue_expired(self, now_ms: int | None = None) -> tuple[int, int]:
        """Sweep all kinds; returns (requeued, moved to dead)."""
        now = now_ms if now_ms is not None else self.clock.now_ms()
        with self.db.tx() as conn:
            return self._sweep_expired_in_tx(conn, now)

    # ------------------------------------------------------------------

    def get_job(self, job_id: str) -> Job:
        row = self.db.query_one("SELECT * FROM jobs WHERE job_id = ?", (job_id,))
        if row is None:
            raise NotFound(f"job {job_id} not found")
        return self._job_from_row(row)

    def find_active_job(self, dataset_id: str, worker_kind: str) -> Job | None:
        row = self.db.query_one(
            "SELECT * FROM jobs WHERE dataset_id = ? AND worker_kind = ?"
            " AND state IN ('ready', 'leased')",
            (dataset_id, worker_kind),
        )
        return None if row is None else self._job_from_row(row)

    def list_jobs(self, state: str | None = None, worker_kind: str | None = None) -> list[Job]:
        clauses, params = [], []
        if state is not None:
            clauses.append("state = ?")
            params.append(state)
        if worker_kind is not None:
            clauses.append("worker_kind = ?")
            params.append(worker_kind)
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        rows = self.db.query(
            f"SELECT * FROM jobs{where} ORDER BY enqueued_at, seq", tuple(params)
        )
        return [self._job_from_row(r) for r in rows]

    def stats(self) -> dict[str, Any]:
        rows = self.db.query(
            "SELECT worker_kind, state, COUNT(*) AS n FROM jobs GROUP BY worker_kind, state"
        )
        by_kind: dict[str, dict[str, int]] = {}
        totals = {"ready": 0, "leased": 0, "done": 0, "dead": 0}
        for row in rows:
            by_kind.setdefault(row["worker_kind"], {})[row["state"]] = row["n"]
            totals[row["state"]] = totals.get(row["state"], 0) + row["n"]
        return {"by_kind": by_kind, "totals": totals}
