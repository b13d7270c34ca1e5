"""The standard worker template: claim -> fetch -> analyze -> submit -> ack.

Workers normally run out of process against the HTTP API; an in-process
client exists for tests and single-process deployments. The analytic is a
pure function over the prepared payload document, so redeliveries replay
to byte-identical result bodies and the idempotent submit keeps exactly
one result row per (datapoint, worker kind).
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from hgdesk.analytics import phq8 as phq8_analytics
from hgdesk.analytics import sts as sts_analytics
from hgdesk.analytics import tug as tug_analytics
from hgdesk.errors import ApiError, NotFound, StaleLease, error_from_wire
from hgdesk.jobqueue import DEFAULT_LEASE_SECS, JobQueue, Lease
from hgdesk.store.datastore import Datastore

__all__ = [
    "AnalyticFn",
    "FinalizeFn",
    "DatasetBundle",
    "WorkerDescriptor",
    "RunReport",
    "WorkerClient",
    "LocalWorkerClient",
    "HttpWorkerClient",
    "builtin_worker",
    "run_worker",
    "run_until_drained",
]

BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 30.0

# (prepared payload document) -> result body
AnalyticFn = Callable[[dict[str, Any]], dict[str, Any]]
# dataset-wide post-pass over [(datapoint doc, body)] -> same, possibly edited
FinalizeFn = Callable[["DatasetBundle", list[tuple[dict[str, Any], dict[str, Any]]]], list[tuple[dict[str, Any], dict[str, Any]]]]


@dataclass(frozen=True)
class WorkerDescriptor:
    worker_kind: str
    payload_schema: str
    result_schema: str
    concurrency: int = 1

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


@dataclass(frozen=True)
class DatasetBundle:
    """A dataset plus its datapoints with payload documents loaded."""

    dataset: dict[str, Any]
    datapoints: tuple[tuple[dict[str, Any], dict[str, Any]], ...]  # (datapoint doc, payload doc)


@dataclass
class RunReport:
    processed: int = 0
    succeeded: int = 0
    failed: int = 0
    stale: int = 0
    results_submitted: int = 0
    errors: list[str] = field(default_factory=list)

    def merge(self, other: "RunReport") -> None:
        self.processed += other.processed
        self.succeeded += other.succeeded
        self.failed += other.failed
        self.stale += other.stale
        self.results_submitted += other.results_submitted
        self.errors.extend(other.errors)

    def to_doc(self) -> dict[str, Any]:
        return {
            "processed": self.processed,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "stale": self.stale,
            "results_submitted": self.results_submitted,
            "errors": list(self.errors),
        }


class WorkerClient(Protocol):
    def claim(self, worker_kind: str, lease_secs: int) -> Lease | None: ...

    def ack(
        self, job_id: str, lease_attempts: int, outcome: str, reason: str | None = None
    ) -> None: ...

    def fetch_dataset(self, dataset_id: str) -> DatasetBundle: ...

    def submit_result(
        self, datapoint_id: str, dataset_id: str, worker_kind: str, body: Mapping[str, Any]
    ) -> None: ...

    def queue_stats(self) -> dict[str, Any]: ...


def _load_payload_doc(payload_doc: Mapping[str, Any], fetch_object) -> dict[str, Any]:
    if payload_doc["kind"] == "file":
        raw = fetch_object(payload_doc["object"]["sha256"])
        return json.loads(raw.decode("utf-8"))
    if payload_doc["kind"] == "text":
        return json.loads(payload_doc["value"])
    raise ApiError(f"payload kind {payload_doc['kind']!r} has no document form")


class LocalWorkerClient:
    """In-process client over the datastore + queue, for tests and one-box runs."""

    def __init__(self, store: Datastore, queue: JobQueue) -> None:
        self.store = store
        self.queue = queue

    def claim(self, worker_kind: str, lease_secs: int) -> Lease | None:
        return self.queue.claim(worker_kind, lease_secs)

    def ack(self, job_id: str, lease_attempts: int, outcome: str, reason: str | None = None) -> None:
        self.queue.ack(job_id, lease_attempts, outcome, reason)

    def fetch_dataset(self, dataset_id: str) -> DatasetBundle:
        dataset = self.store.get_dataset(dataset_id)
        pairs = []
        for dp in self.store.list_datapoints(dataset_id=dataset_id):
            doc = dp.to_doc()
            payload = _load_payload_doc(doc["payload"], lambda d: self.store.get_object(d)[0])
            pairs.append((doc, payload))
        return DatasetBundle(dataset=dataset.to_doc(), datapoints=tuple(pairs))

    def submit_result(
        self, datapoint_id: str, dataset_id: str, worker_kind: str, body: Mapping[str, Any]
    ) -> None:
        self.store.upsert_result(
            datapoint_id=datapoint_id,
            dataset_id=dataset_id,
            worker_kind=worker_kind,
            body=dict(body),
        )

    def queue_stats(self) -> dict[str, Any]:
        return self.queue.stats()


class HttpWorkerClient:
    """Client for out-of-process workers speaking the HTTP API."""

    def __init__(self, base_url: str, token: str, timeout_s: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(
            base_url=self.base_url,
            headers={"authorization": f"Bearer {token}"},
            timeout=timeout_s,
        )

    def close(self) -> None:
        self._client.close()

    def _raise_for(self, response: httpx.Response) -> None:
        if response.status_code < 400:
            return
        try:
            doc = response.json()
        except ValueError:
            doc = {"code": "INTERNAL", "message": response.text[:200]}
        raise error_from_wire(response.status_code, doc)

    def claim(self, worker_kind: str, lease_secs: int) -> Lease | None:
        response = self._client.post(
            "/v1/queue/claim", json={"worker_kind": worker_kind, "lease_secs": lease_secs}
        )
        if response.status_code == 204:
            return None
        self._raise_for(response)
        doc = response.json()
        from hgdesk.jobqueue import Job

        job = Job(
            job_id=doc["job"]["job_id"],
            dataset_id=doc["job"]["dataset_id"],
            worker_kind=doc["job"]["worker_kind"],
            state=doc["job"]["state"],
            attempts=doc["job"]["attempts"],
            max_retries=doc["job"]["max_retries"],
            enqueued_at=0,
            lease_expires_at=None,
        )
        return Lease(job=job, attempts=doc["attempts"], lease_expires_at=doc["lease_expires_at"])

    def ack(self, job_id: str, lease_attempts: int, outcome: str, reason: str | None = None) -> None:
        payload: dict[str, Any] = {"outcome": outcome, "lease_attempts": lease_attempts}
        if reason is not None:
            payload["reason"] = reason
        response = self._client.post(f"/v1/queue/{job_id}/ack", json=payload)
        self._raise_for(response)

    def fetch_dataset(self, dataset_id: str) -> DatasetBundle:
        response = self._client.get(f"/v1/datasets/{dataset_id}")
        self._raise_for(response)
        dataset = response.json()
        response = self._client.get(f"/v1/datasets/{dataset_id}/datapoints")
        self._raise_for(response)
        pairs = []
        for doc in response.json()["datapoints"]:
            payload = _load_payload_doc(doc["payload"], self._fetch_object)
            pairs.append((doc, payload))
        return DatasetBundle(dataset=dataset, datapoints=tuple(pairs))

    def _fetch_object(self, digest: str) -> bytes:
        response = self._client.get(f"/v1/objects/{digest}")
        self._raise_for(response)
        return response.content

    def submit_result(
        self, datapoint_id: str, dataset_id: str, worker_kind: str, body: Mapping[str, Any]
    ) -> None:
        response = self._client.post(
            "/v1/internal/results",
            json={
                "datapoint_id": datapoint_id,
                "dataset_id": dataset_id,
                "worker_kind": worker_kind,
                "body": dict(body),
            },
        )
        self._raise_for(response)

    def queue_stats(self) -> dict[str, Any]:
        response = self._client.get("/v1/queue/stats")
        self._raise_for(response)
        return response.json()


# ----------------------------------------------------------------------
# built-in analytics wiring
# ----------------------------------------------------------------------


def _tug_finalize(
    bundle: DatasetBundle, results: list[tuple[dict[str, Any], dict[str, Any]]]
) -> list[tuple[dict[str, Any], dict[str, Any]]]:
    """Widen each body's daily_mean to the subject's whole day.

    The dataset is one (study, test, day), so a subject's mean spans every
    episode in every trace they uploaded that day.
    """
    by_subject: dict[str, list[float]] = {}
    for dp_doc, body in results:
        values = [p["tug_seconds"] for p in body.get("predictions", [])]
        by_subject.setdefault(dp_doc["subject_id"], []).extend(values)
    for dp_doc, body in results:
        values = by_subject.get(dp_doc["subject_id"], [])
        body["daily_mean"] = (sum(values) / len(values)) if values else None
    return results


def builtin_worker(
    worker_kind: str,
    model_path: str | None = None,
    concurrency: int = 1,
) -> tuple[WorkerDescriptor, AnalyticFn, FinalizeFn | None]:
    """Descriptor + analytic + optional dataset post-pass for a built-in kind."""
    if worker_kind == "phq8":
        descriptor = WorkerDescriptor("phq8", "phq8/v1", "phq8.result/v1", concurrency)
        return descriptor, phq8_analytics.analyze, None
    if worker_kind == "tug":
        model = (
            tug_analytics.load_model(model_path)
            if model_path
            else tug_analytics.default_linear_model()
        )
        descriptor = WorkerDescriptor("tug", "accel/v1", "tug.result/v1", concurrency)
        return descriptor, (lambda doc: tug_analytics.analyze_trace(doc, model)), _tug_finalize
    if worker_kind == "sit_to_stand":
        descriptor = WorkerDescriptor("sit_to_stand", "pose2d/v1", "sts.result/v1", concurrency)
        return descriptor, sts_analytics.analyze_pose, None
    raise ValueError(f"unknown worker kind {worker_kind!r}")


# ----------------------------------------------------------------------
# the loop
# ----------------------------------------------------------------------

_INFRA_ERRORS = (httpx.TransportError, ConnectionError, OSError)


def _process_job(
    client: WorkerClient,
    lease: Lease,
    analytic: AnalyticFn,
    finalize: FinalizeFn | None,
    report: RunReport,
) -> None:
    job = lease.job
    try:
        bundle = client.fetch_dataset(job.dataset_id)
        results = [(dp_doc, analytic(payload_doc)) for dp_doc, payload_doc in bundle.datapoints]
        if finalize is not None:
            results = finalize(bundle, results)
        for dp_doc, body in results:
            client.submit_result(dp_doc["datapoint_id"], job.dataset_id, job.worker_kind, body)
            report.results_submitted += 1
        client.ack(job.job_id, lease.attempts, "success")
        report.succeeded += 1
    except StaleLease:
        report.stale += 1
    except ApiError as err:
        report.errors.append(f"{job.job_id}: {err.code}: {err.message}")
        try:
            client.ack(job.job_id, lease.attempts, "failure", reason=f"{err.code}: {err.message}")
            report.failed += 1
        except StaleLease:
            report.stale += 1
    finally:
        report.processed += 1


def run_worker(
    descriptor: WorkerDescriptor,
    analytic: AnalyticFn,
    client: WorkerClient,
    finalize: FinalizeFn | None = None,
    *,
    lease_secs: int = DEFAULT_LEASE_SECS,
    stop: threading.Event | None = None,
    max_jobs: int | None = None,
    drain: bool = False,
    poll_interval_s: float = 0.05,
    sleep: Callable[[float], None] = time.sleep,
) -> RunReport:
    """Run ``descriptor.concurrency`` claim loops until stopped or drained.

    ``drain=True`` exits once a claim comes back empty; otherwise the loop
    polls until ``stop`` is set or ``max_jobs`` jobs have been processed.
    Infrastructure errors back off exponentially (0.5 s doubling to a 30 s
    cap) and the in-flight job is abandoned to lease-expiry redelivery.
    """
    stop = stop or threading.Event()
    report = RunReport()
    lock = threading.Lock()
    claimed_total = 0

    def loop() -> None:
        nonlocal claimed_total
        local = RunReport()
        backoff = BACKOFF_BASE_S
        while not stop.is_set():
            with lock:
                if max_jobs is not None and claimed_total >= max_jobs:
                    break
            try:
                lease = client.claim(descriptor.worker_kind, lease_secs)
            except _INFRA_ERRORS as err:
                local.errors.append(f"claim: {err}")
                sleep(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
                continue
            except ApiError as err:
                local.errors.append(f"claim: {err.code}: {err.message}")
                sleep(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
                continue
            backoff = BACKOFF_BASE_S
            if lease is None:
                if drain:
                    break
                sleep(poll_interval_s)
                continue
            with lock:
                claimed_total += 1
            try:
                _process_job(client, lease, analytic, finalize, local)
            except _INFRA_ERRORS as err:
                # job left leased; redelivered after expiry
                local.errors.append(f"{lease.job.job_id}: abandoned: {err}")
                local.processed += 1
                sleep(backoff)
                backoff = min(backoff * 2, BACKOFF_CAP_S)
        with lock:
            report.merge(local)

    threads = [
        threading.Thread(target=loop, name=f"{descriptor.worker_kind}-worker-{i}", daemon=True)
        for i in range(descriptor.concurrency)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return report


def run_until_drained(
    client: WorkerClient,
    kinds: Sequence[str] = ("phq8", "tug", "sit_to_stand"),
    model_path: str | None = None,
    concurrency: int = 1,
) -> RunReport:
    """Process every ready job of the given kinds, then return."""
    report = RunReport()
    for kind in kinds:
        descriptor, analytic, finalize = builtin_worker(kind, model_path=model_path)
        descriptor = WorkerDescriptor(
            descriptor.worker_kind,
            descriptor.payload_schema,
            descriptor.result_schema,
            concurrency,
        )
        report.merge(run_worker(descriptor, analytic, client, finalize, drain=True))
    return report
