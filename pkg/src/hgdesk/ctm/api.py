"""HTTP surface of the task-management service.

Thin JSON-over-HTTP veneer: every route authenticates a bearer token,
enforces study scoping, and delegates to the service/store/queue layers.
Wire conventions: snake_case documents, ISO-8601 UTC timestamps, errors
as ``{"code": ..., "message": ...}`` with the matching HTTP status.

``build_runtime`` assembles the persistent pieces (database, object
store, queue, scheduler) so the CLI, tests, and the ASGI app share one
composition root. A runtime opened with ``virtual_clock=True`` freezes
time under a manual clock and exposes ``/v1/internal/clock`` and
``/v1/internal/tick`` so integration harnesses can drive days to pass
deterministically; the wall-clock server runs the scheduler in a
background thread instead and keeps those endpoints disabled.
"""
from __future__ import annotations

import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

import hgdesk
from hgdesk.clock import Clock, ManualClock, SystemClock
from hgdesk.ctm.auth import authenticate, require_role, require_study
from hgdesk.ctm.rules import evaluate_rule
from hgdesk.ctm.scheduler import Scheduler
from hgdesk.ctm.service import CtmService
from hgdesk.domain.timefmt import day_bounds_ms, day_of_ms, fmt_ms, parse_ms
from hgdesk.errors import ApiError, Forbidden, NotFound, ValidationFailed
from hgdesk.jobqueue import JobQueue
from hgdesk.store.database import Database
from hgdesk.store.datastore import Credential, Datastore
from hgdesk.store.objects import ObjectStore

__all__ = ["ServiceConfig", "Runtime", "build_runtime", "create_app"]


@dataclass(frozen=True)
class ServiceConfig:
    db_path: Path
    object_dir: Path
    virtual_clock: bool = False
    tick_secs: float = 5.0
    portal_dir: Path | None = None
    queue_events: bool = False


@dataclass
class Runtime:
    config: ServiceConfig
    clock: Clock
    db: Database
    store: Datastore
    queue: JobQueue
    service: CtmService
    scheduler: Scheduler
    _stop: threading.Event = field(default_factory=threading.Event)
    _thread: threading.Thread | None = None

    def start_background_scheduler(self) -> None:
        if self.config.virtual_clock or self._thread is not None:
            return
        self._thread = threading.Thread(
            target=self.scheduler.run_forever, args=(self._stop,), daemon=True
        )
        self._thread.start()

    def stop_background_scheduler(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def worker_token(self) -> str:
        """The deployment's worker token, minted once and reused."""
        existing = self.store.db.get_meta("worker_token")
        if existing:
            return existing
        token = self.store.mint_credential("worker")
        self.store.db.set_meta("worker_token", token)
        return token

    def close(self) -> None:
        self.stop_background_scheduler()
        self.db.close()


def build_runtime(config: ServiceConfig) -> Runtime:
    clock: Clock = ManualClock() if config.virtual_clock else SystemClock()
    db = Database(config.db_path)
    store = Datastore(db, ObjectStore(config.object_dir), clock=clock)
    queue = JobQueue(db, clock, record_events=config.queue_events)
    service = CtmService(store, queue, clock)
    scheduler = Scheduler(store, queue, service, clock, tick_secs=config.tick_secs)
    return Runtime(
        config=config,
        clock=clock,
        db=db,
        store=store,
        queue=queue,
        service=service,
        scheduler=scheduler,
    )


def _when(value: str | None, *, end: bool = False) -> int | None:
    """Parse a wire timestamp or bare day into epoch ms (day end exclusive)."""
    if value is None or value == "":
        return None
    try:
        if len(value) == 10:
            bounds = day_bounds_ms(value)
            return bounds[1] if end else bounds[0]
        return parse_ms(value)
    except ValueError:
        raise ValidationFailed(
            f"bad timestamp {value!r}; want YYYY-MM-DD or YYYY-MM-DDTHH:MM:SS.mmmZ",
            code="BAD_TIMESTAMP",
        )


def _body_str(body: dict[str, Any], key: str) -> str:
    value = body.get(key)
    if not isinstance(value, str) or not value:
        raise ValidationFailed(f"{key} must be a non-empty string", code="BAD_REQUEST")
    return value


def create_app(runtime: Runtime) -> FastAPI:
    config = runtime.config
    store = runtime.store
    queue = runtime.queue
    service = runtime.service

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        runtime.start_background_scheduler()
        try:
            yield
        finally:
            runtime.stop_background_scheduler()

    app = FastAPI(title="ctm", version=hgdesk.__version__, lifespan=lifespan, docs_url=None)
    app.state.runtime = runtime

    @app.exception_handler(ApiError)
    async def _api_error(_: Request, exc: ApiError) -> JSONResponse:
        return JSONResponse(status_code=exc.http_status, content=exc.to_doc())

    @app.exception_handler(RequestValidationError)
    async def _request_error(_: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(
            status_code=400,
            content={"code": "BAD_REQUEST", "message": "malformed request", "details": None},
        )

    def auth(request: Request) -> Credential:
        return authenticate(store, request.headers.get("authorization"))

    def researcher_of(request: Request, study_id: str) -> Credential:
        cred = auth(request)
        require_role(cred, "researcher")
        require_study(cred, study_id)
        store.get_study(study_id)
        return cred

    def reader_of(request: Request, study_id: str) -> Credential:
        """Researcher or device scoped to the study (workers pass)."""
        cred = auth(request)
        require_study(cred, study_id)
        store.get_study(study_id)
        return cred

    # ------------------------------------------------------------------
    # meta
    # ------------------------------------------------------------------

    @app.get("/v1/healthz")
    def healthz() -> dict[str, Any]:
        return {"status": "ok", "time": fmt_ms(runtime.clock.now_ms())}

    @app.get("/v1/meta")
    def meta() -> dict[str, Any]:
        return {
            "service": "ctm",
            "version": hgdesk.__version__,
            "time": fmt_ms(runtime.clock.now_ms()),
            "virtual_clock": config.virtual_clock,
        }

    # ------------------------------------------------------------------
    # studies + study-scoped design entities
    # ------------------------------------------------------------------

    @app.post("/v1/studies", status_code=201)
    def create_study(body: dict[str, Any]) -> dict[str, Any]:
        study, token = service.create_study(_body_str(body, "name"))
        return {"study": study.to_doc(), "token": token}

    @app.get("/v1/studies/{study_id}")
    def get_study(study_id: str, request: Request) -> dict[str, Any]:
        reader_of(request, study_id)
        return store.get_study(study_id).to_doc()

    @app.post("/v1/studies/{study_id}/subjects", status_code=201)
    def enroll_subject(study_id: str, body: dict[str, Any], request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        subject, device_token = service.enroll_subject(
            study_id, _body_str(body, "raw_id"), body.get("attributes") or {}
        )
        return {"subject": subject.to_doc(), "device_token": device_token}

    @app.get("/v1/studies/{study_id}/subjects")
    def list_subjects(study_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {"subjects": [s.to_doc() for s in store.list_subjects(study_id)]}

    @app.post("/v1/studies/{study_id}/cohorts", status_code=201)
    def define_cohort(study_id: str, body: dict[str, Any], request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        cohort = service.define_cohort(
            study_id, _body_str(body, "name"), body.get("selector") or {}
        )
        return {"cohort": cohort.to_doc()}

    @app.get("/v1/studies/{study_id}/cohorts")
    def list_cohorts(study_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {"cohorts": [c.to_doc() for c in store.list_cohorts(study_id)]}

    @app.get("/v1/studies/{study_id}/cohorts/{cohort_id}")
    def get_cohort(study_id: str, cohort_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        cohort = store.get_cohort(cohort_id)
        if cohort.study_id != study_id:
            raise Forbidden("cohort belongs to another study")
        return cohort.to_doc()

    @app.post("/v1/studies/{study_id}/testsets", status_code=201)
    def define_testset(study_id: str, body: dict[str, Any], request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        testset = service.define_testset(
            study_id, _body_str(body, "name"), body.get("tests") or []
        )
        return {"testset": testset.to_doc()}

    @app.get("/v1/studies/{study_id}/testsets")
    def list_testsets(study_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {"testsets": [t.to_doc() for t in store.list_testsets(study_id)]}

    @app.post("/v1/studies/{study_id}/tasks", status_code=201)
    def create_task(study_id: str, body: dict[str, Any], request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        task, occurrences = service.create_task(
            study_id,
            _body_str(body, "testset_id"),
            _body_str(body, "cohort_id"),
            body.get("schedule") or {},
        )
        return {"task": task.to_doc(), "occurrences": [o.to_doc() for o in occurrences]}

    @app.get("/v1/studies/{study_id}/tasks")
    def list_tasks(study_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {"tasks": [t.to_doc() for t in store.list_tasks(study_id)]}

    @app.get("/v1/studies/{study_id}/occurrences")
    def list_occurrences(
        study_id: str,
        request: Request,
        task_id: str | None = None,
        subject_id: str | None = None,
    ) -> dict[str, Any]:
        researcher_of(request, study_id)
        occurrences = store.list_occurrences(
            study_id=study_id, task_id=task_id, subject_id=subject_id
        )
        return {"occurrences": [o.to_doc() for o in occurrences]}

    # ------------------------------------------------------------------
    # rules
    # ------------------------------------------------------------------

    @app.post("/v1/studies/{study_id}/rules", status_code=201)
    def define_rule(study_id: str, body: dict[str, Any], request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        rule = service.define_rule(
            study_id,
            body.get("trigger") or {},
            body.get("predicate") or {},
            body.get("action") or {},
            active=bool(body.get("active", True)),
        )
        return {"rule": rule.to_doc()}

    @app.get("/v1/studies/{study_id}/rules")
    def list_rules(study_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {"rules": [r.to_doc() for r in store.list_rules(study_id)]}

    def _study_rule(study_id: str, rule_id: str):
        rule = store.get_rule(rule_id)
        if rule.study_id != study_id:
            raise Forbidden("rule belongs to another study")
        return rule

    @app.post("/v1/studies/{study_id}/rules/{rule_id}/evaluate")
    def evaluate_rule_now(
        study_id: str, rule_id: str, body: dict[str, Any], request: Request
    ) -> dict[str, Any]:
        researcher_of(request, study_id)
        rule = _study_rule(study_id, rule_id)
        day = body.get("day") or day_of_ms(runtime.clock.now_ms())
        return evaluate_rule(service, rule, str(day)).to_doc()

    @app.get("/v1/studies/{study_id}/rules/{rule_id}/runs")
    def list_rule_runs(study_id: str, rule_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        _study_rule(study_id, rule_id)
        runs = [
            {
                "rule_id": row["rule_id"],
                "day": row["day"],
                "cohort_id": row["cohort_id"],
                "task_id": row["task_id"],
                "evaluated_at": fmt_ms(row["evaluated_at"]),
            }
            for row in store.list_rule_runs(rule_id)
        ]
        return {"runs": runs}

    # ------------------------------------------------------------------
    # device side: poll + upload
    # ------------------------------------------------------------------

    @app.get("/v1/devices/{device_id}/pending-tasks")
    def pending_tasks(device_id: str, request: Request, now: str | None = None) -> dict[str, Any]:
        cred = auth(request)
        if cred.role == "device":
            if cred.device_id != device_id:
                raise Forbidden("token is bound to another device")
        else:
            require_role(cred, "researcher")
            subject = store.get_subject_by_device(device_id)
            if subject is None:
                raise NotFound(f"device {device_id} not found")
            require_study(cred, subject.study_id)
        return {"tasks": service.poll_tasks(device_id, now_ms=_when(now))}

    @app.post("/v1/uploads")
    def upload(body: dict[str, Any], request: Request) -> JSONResponse:
        cred = auth(request)
        document = body.get("document")
        if not isinstance(document, dict):
            raise ValidationFailed("document must be a JSON object", code="BAD_PAYLOAD")
        collected_at = _when(_body_str(body, "collected_at"))
        assert collected_at is not None
        datapoint, created = service.upload(
            cred,
            _body_str(body, "occurrence_id"),
            _body_str(body, "test_id"),
            _body_str(body, "idempotency_key"),
            collected_at,
            document,
        )
        return JSONResponse(
            status_code=201 if created else 200,
            content={"datapoint": datapoint.to_doc(), "created": created},
        )

    # ------------------------------------------------------------------
    # researcher reads: results, datapoints, datasets, vault
    # ------------------------------------------------------------------

    @app.get("/v1/studies/{study_id}/results")
    def query_results(
        study_id: str,
        request: Request,
        subject_id: str | None = None,
        worker_kind: str | None = None,
        from_: str | None = Query(None, alias="from"),
        to: str | None = None,
    ) -> dict[str, Any]:
        cred = reader_of(request, study_id)
        results = service.query_results(
            cred,
            study_id,
            subject_id=subject_id,
            worker_kind=worker_kind,
            from_ms=_when(from_),
            to_ms=_when(to, end=True),
        )
        return {"results": [r.to_doc() for r in results]}

    @app.get("/v1/studies/{study_id}/datapoints")
    def list_datapoints(study_id: str, request: Request) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {"datapoints": [d.to_doc() for d in store.list_datapoints(study_id=study_id)]}

    @app.get("/v1/studies/{study_id}/datasets")
    def list_datasets(
        study_id: str, request: Request, status: str | None = None
    ) -> dict[str, Any]:
        researcher_of(request, study_id)
        return {
            "datasets": [d.to_doc() for d in store.list_datasets(study_id, status=status)]
        }

    @app.get("/v1/studies/{study_id}/vault")
    def vault(study_id: str, request: Request) -> dict[str, Any]:
        cred = auth(request)
        require_role(cred, "researcher")  # never workers: this is the PII table
        require_study(cred, study_id)
        store.get_study(study_id)
        entries = [
            {"raw_id": raw_id, "subject_id": pseudonym}
            for raw_id, pseudonym in store.vault_rows(study_id)
        ]
        return {"entries": entries}

    # ------------------------------------------------------------------
    # worker side: datasets, objects, results, queue
    # ------------------------------------------------------------------

    def _dataset_reader(request: Request, dataset_id: str):
        cred = auth(request)
        dataset = store.get_dataset(dataset_id)
        require_study(cred, dataset.study_id)
        if cred.role == "device":
            raise Forbidden("device tokens cannot read datasets")
        return dataset

    @app.get("/v1/datasets/{dataset_id}")
    def get_dataset(dataset_id: str, request: Request) -> dict[str, Any]:
        return _dataset_reader(request, dataset_id).to_doc()

    @app.get("/v1/datasets/{dataset_id}/datapoints")
    def dataset_datapoints(dataset_id: str, request: Request) -> dict[str, Any]:
        dataset = _dataset_reader(request, dataset_id)
        points = store.list_datapoints(dataset_id=dataset.dataset_id)
        return {"datapoints": [d.to_doc() for d in points]}

    @app.get("/v1/objects/{digest}")
    def get_object(digest: str, request: Request) -> Response:
        cred = auth(request)
        require_role(cred, "worker")
        data, media_type = store.get_object(digest)
        return Response(content=data, media_type=media_type)

    @app.post("/v1/internal/results")
    def submit_result(body: dict[str, Any], request: Request) -> dict[str, Any]:
        cred = auth(request)
        require_role(cred, "worker")
        result_body = body.get("body")
        if not isinstance(result_body, dict):
            raise ValidationFailed("body must be a JSON object", code="BAD_REQUEST")
        result = service.submit_result(
            _body_str(body, "datapoint_id"),
            _body_str(body, "dataset_id"),
            _body_str(body, "worker_kind"),
            result_body,
        )
        return {"result": result.to_doc()}

    @app.post("/v1/queue/claim")
    def claim_job(body: dict[str, Any], request: Request) -> Response:
        cred = auth(request)
        require_role(cred, "worker")
        lease_secs = body.get("lease_secs", 60)
        if not isinstance(lease_secs, int) or lease_secs <= 0:
            raise ValidationFailed("lease_secs must be a positive integer", code="BAD_REQUEST")
        lease = queue.claim(_body_str(body, "worker_kind"), lease_secs=lease_secs)
        if lease is None:
            return Response(status_code=204)
        return JSONResponse(
            content={
                "job": lease.job.to_doc(),
                "attempts": lease.attempts,
                "lease_expires_at": lease.lease_expires_at,
            }
        )

    @app.post("/v1/queue/{job_id}/ack")
    def ack_job(job_id: str, body: dict[str, Any], request: Request) -> dict[str, Any]:
        cred = auth(request)
        require_role(cred, "worker")
        outcome = _body_str(body, "outcome")
        if outcome not in ("success", "failure"):
            raise ValidationFailed("outcome must be success or failure", code="BAD_REQUEST")
        attempts = body.get("lease_attempts")
        if not isinstance(attempts, int):
            raise ValidationFailed("lease_attempts must be an integer", code="BAD_REQUEST")
        reason = body.get("reason")
        state = queue.ack(job_id, attempts, outcome, reason if isinstance(reason, str) else None)
        return {"job_id": job_id, "state": state}

    @app.get("/v1/queue/stats")
    def queue_stats(request: Request) -> dict[str, Any]:
        cred = auth(request)
        require_role(cred, "worker", "researcher")
        return queue.stats()

    @app.get("/v1/queue/jobs")
    def queue_jobs(
        request: Request, state: str | None = None, worker_kind: str | None = None
    ) -> dict[str, Any]:
        cred = auth(request)
        require_role(cred, "worker", "researcher")
        return {"jobs": [j.to_doc() for j in queue.list_jobs(state=state, worker_kind=worker_kind)]}

    # ------------------------------------------------------------------
    # virtual-clock harness (enabled only when the runtime owns time)
    # ------------------------------------------------------------------

    def _require_virtual() -> ManualClock:
        if not config.virtual_clock or not isinstance(runtime.clock, ManualClock):
            raise Forbidden("server is not running with a virtual clock")
        return runtime.clock

    @app.post("/v1/internal/clock")
    def set_clock(body: dict[str, Any]) -> dict[str, Any]:
        clock = _require_virtual()
        if "set" in body:
            when = _when(str(body["set"]))
            assert when is not None
            clock.set(when)
        elif "advance_ms" in body:
            step = body["advance_ms"]
            if not isinstance(step, int) or step < 0:
                raise ValidationFailed("advance_ms must be a non-negative int", code="BAD_REQUEST")
            clock.advance(step)
        else:
            raise ValidationFailed("need 'set' or 'advance_ms'", code="BAD_REQUEST")
        return {"now": fmt_ms(clock.now_ms())}

    @app.post("/v1/internal/tick")
    def tick() -> dict[str, Any]:
        _require_virtual()
        summary = runtime.scheduler.tick()
        summary["now"] = fmt_ms(summary["now"])
        return summary

    if config.portal_dir is not None and Path(config.portal_dir).is_dir():
        app.mount("/portal", StaticFiles(directory=str(config.portal_dir), html=True), name="portal")

    return app
