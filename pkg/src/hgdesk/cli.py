"""Operator command line: serve, worker, sim, study apply, export, queue inspect.

Exit codes: 0 success, 1 usage error, 2 infrastructure failure (server
unreachable, port busy), 3 validation / authorization rejection.
"""
from __future__ import annotations

import csv
import importlib.resources
import json
import os
import signal
import socket
import sys
import threading
from pathlib import Path
from typing import Any, Mapping

import click
import httpx
import jsonschema
import yaml

import hgdesk
from hgdesk.domain.validation import METRICS_BY_WORKER_KIND
from hgdesk.errors import ApiError, error_from_wire

EXIT_OK, EXIT_USAGE, EXIT_INFRA, EXIT_VALIDATION = 0, 1, 2, 3

DEFAULT_PORT = 8080
DEFAULT_TICK_SECS = 5.0
WORKER_TOKEN_FILE = "worker.token"
ALL_KINDS = ("phq8", "tug", "sit_to_stand")


class InfraFailure(click.ClickException):
    exit_code = EXIT_INFRA


class Api:
    """Minimal JSON client for the service; raises ApiError on 4xx/5xx."""

    def __init__(self, server: str, token: str | None = None, timeout_s: float = 30.0) -> None:
        headers = {"authorization": f"Bearer {token}"} if token else {}
        self.http = httpx.Client(base_url=server.rstrip("/"), headers=headers, timeout=timeout_s)

    def request(self, method: str, path: str, **kwargs: Any) -> Any:
        response = self.http.request(method, path, **kwargs)
        if response.status_code >= 400:
            try:
                doc = response.json()
            except ValueError:
                doc = {"code": "INTERNAL", "message": response.text[:200]}
            raise error_from_wire(response.status_code, doc)
        if response.status_code == 204 or not response.content:
            return None
        return response.json()

    def close(self) -> None:
        self.http.close()


def _echo_doc(doc: Any, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
    else:
        click.echo(yaml.safe_dump(doc, sort_keys=False).rstrip())


@click.group()
@click.version_option(version=hgdesk.__version__, prog_name="hg")
@click.option("--server", envvar="HG_SERVER", default=None, help="Service base URL.")
@click.option("--token", envvar="HG_TOKEN", default=None, help="Bearer token.")
@click.option("--json", "json_out", is_flag=True, help="Machine-readable output.")
@click.pass_context
def cli(ctx: click.Context, server: str | None, token: str | None, json_out: bool) -> None:
    """Desk-scale remote-monitoring platform: service, workers, simulator."""
    ctx.obj = {"server": server, "token": token, "json": json_out}


def _server_of(ctx: click.Context, override: str | None) -> str:
    server = override or ctx.obj.get("server")
    if not server:
        raise click.UsageError("need --server (or HG_SERVER)")
    return server


def _token_of(ctx: click.Context, override: str | None, required: bool = True) -> str | None:
    token = override or ctx.obj.get("token")
    if required and not token:
        raise click.UsageError("need --token (or HG_TOKEN)")
    return token


# ----------------------------------------------------------------------
# serve
# ----------------------------------------------------------------------


@cli.command()
@click.option("--port", envvar="HG_PORT", default=DEFAULT_PORT, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option(
    "--data-dir",
    default="./data",
    show_default=True,
    type=click.Path(path_type=Path),
    help="Holds the database, object store, and worker token.",
)
@click.option("--db-path", envvar="HG_DB_PATH", default=None, type=click.Path(path_type=Path))
@click.option(
    "--object-dir", envvar="HG_OBJECT_DIR", default=None, type=click.Path(path_type=Path)
)
@click.option(
    "--tick-secs",
    envvar="HG_SCHED_TICK_SECS",
    default=DEFAULT_TICK_SECS,
    show_default=True,
    type=float,
)
@click.option(
    "--virtual-clock",
    is_flag=True,
    help="Freeze time under test control (/v1/internal/clock, /v1/internal/tick).",
)
@click.option("--portal-dir", default=None, type=click.Path(path_type=Path))
def serve(
    port: int,
    host: str,
    data_dir: Path,
    db_path: Path | None,
    object_dir: Path | None,
    tick_secs: float,
    virtual_clock: bool,
    portal_dir: Path | None,
) -> None:
    """Run the service (API + datastore + queue + scheduler) in one process."""
    import uvicorn

    from hgdesk.ctm.api import ServiceConfig, build_runtime, create_app

    data_dir.mkdir(parents=True, exist_ok=True)
    config = ServiceConfig(
        db_path=db_path or data_dir / "ctm.sqlite3",
        object_dir=object_dir or data_dir / "objects",
        virtual_clock=virtual_clock,
        tick_secs=tick_secs,
        portal_dir=portal_dir,
    )

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        probe.bind((host, port))
    except OSError as exc:
        raise InfraFailure(f"cannot bind {host}:{port}: {exc}")
    finally:
        probe.close()

    runtime = build_runtime(config)
    token_path = data_dir / WORKER_TOKEN_FILE
    if not token_path.exists():
        token_path.write_text(runtime.worker_token() + "\n")
        token_path.chmod(0o600)
        click.echo(f"worker token written to {token_path}", err=True)

    app = create_app(runtime)
    click.echo(
        f"serving on http://{host}:{port} "
        f"(db={config.db_path}, clock={'virtual' if virtual_clock else 'wall'})",
        err=True,
    )
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        runtime.close()


# ----------------------------------------------------------------------
# worker
# ----------------------------------------------------------------------


@cli.command()
@click.option("--server", default=None)
@click.option("--token", default=None, help="Worker token (else --token-file).")
@click.option(
    "--token-file",
    default=None,
    type=click.Path(path_type=Path),
    help=f"File holding the worker token (e.g. <data-dir>/{WORKER_TOKEN_FILE}).",
)
@click.option(
    "--kinds",
    default="all",
    show_default=True,
    help="Comma-separated worker kinds, or 'all'.",
)
@click.option("--model", default=None, type=click.Path(path_type=Path), help="Gait model file.")
@click.option("--concurrency", default=1, show_default=True, type=int)
@click.option("--lease-secs", default=60, show_default=True, type=int)
@click.option("--drain", is_flag=True, help="Exit once the queue is empty.")
@click.pass_context
def worker(
    ctx: click.Context,
    server: str | None,
    token: str | None,
    token_file: Path | None,
    kinds: str,
    model: Path | None,
    concurrency: int,
    lease_secs: int,
    drain: bool,
) -> None:
    """Consume analytics jobs from the service's queue over HTTP."""
    from hgdesk.workers.kit import (
        HttpWorkerClient,
        WorkerDescriptor,
        builtin_worker,
        run_until_drained,
        run_worker,
    )

    base = _server_of(ctx, server)
    if token is None and token_file is not None:
        token = token_file.read_text().strip()
    token = _token_of(ctx, token)
    kind_list = ALL_KINDS if kinds == "all" else tuple(k.strip() for k in kinds.split(","))
    for kind in kind_list:
        if kind not in ALL_KINDS:
            raise click.UsageError(f"unknown worker kind {kind!r}")

    client = HttpWorkerClient(base, str(token))
    model_path = str(model) if model else None
    try:
        if drain:
            report = run_until_drained(
                client, kinds=kind_list, model_path=model_path, concurrency=concurrency
            )
            _echo_doc(report.to_doc(), ctx.obj["json"])
            return
        stop = threading.Event()
        signal.signal(signal.SIGINT, lambda *_: stop.set())
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        threads = []
        reports = []
        for kind in kind_list:
            descriptor, analytic, finalize = builtin_worker(kind, model_path=model_path)
            descriptor = WorkerDescriptor(
                descriptor.worker_kind, descriptor.payload_schema,
                descriptor.result_schema, concurrency,
            )
            thread = threading.Thread(
                target=lambda d=descriptor, a=analytic, f=finalize: reports.append(
                    run_worker(d, a, client, finalize=f, lease_secs=lease_secs, stop=stop)
                ),
                daemon=True,
                name=f"{kind}-runner",
            )
            thread.start()
            threads.append(thread)
        click.echo(f"workers running for {', '.join(kind_list)} — Ctrl-C to stop", err=True)
        stop.wait()
        for thread in threads:
            thread.join(timeout=10)
        merged: dict[str, Any] = {}
        for report in reports:
            for key, value in report.to_doc().items():
                if isinstance(value, int):
                    merged[key] = merged.get(key, 0) + value
        _echo_doc(merged, ctx.obj["json"])
    finally:
        client.close()


# ----------------------------------------------------------------------
# sim
# ----------------------------------------------------------------------


@cli.command()
@click.option("--server", default=None)
@click.option("--subjects", default=10, show_default=True, type=int)
@click.option("--days", default=3, show_default=True, type=int)
@click.option("--compliance", default=1.0, show_default=True, type=float)
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--start-day", default="2026-03-02", show_default=True)
@click.option("--report", "report_path", default=None, type=click.Path(path_type=Path))
@click.option("--truth", "truth_path", default=None, type=click.Path(path_type=Path))
@click.option("--worker-token", default=None, help="Drain analytics jobs in-process.")
@click.option("--worker-token-file", default=None, type=click.Path(path_type=Path))
@click.option("--study-name", default="fleet-study", show_default=True)
@click.pass_context
def sim(
    ctx: click.Context,
    server: str | None,
    subjects: int,
    days: int,
    compliance: float,
    seed: int,
    start_day: str,
    report_path: Path | None,
    truth_path: Path | None,
    worker_token: str | None,
    worker_token_file: Path | None,
    study_name: str,
) -> None:
    """Simulate a device fleet against a virtual-clock server."""
    from hgdesk.sim.fleet import FleetError, run_fleet
    from hgdesk.sim.profiles import make_profiles

    base = _server_of(ctx, server)
    if worker_token is None and worker_token_file is not None:
        worker_token = worker_token_file.read_text().strip()
    profiles = make_profiles(subjects, master_seed=seed, compliance_prob=compliance)
    try:
        result = run_fleet(
            base,
            profiles,
            days,
            start_day=start_day,
            study_name=study_name,
            worker_token=worker_token,
        )
    except FleetError as exc:
        raise InfraFailure(str(exc))
    report = dict(result.report)
    report["seed"] = seed
    report["study_id"] = result.handles.study_id
    if report_path is not None:
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        click.echo(f"report written to {report_path}", err=True)
    if truth_path is not None:
        result.truth.dump(truth_path)
        click.echo(f"ground truth written to {truth_path}", err=True)
    summary = {
        "study_id": result.handles.study_id,
        "researcher_token": result.handles.researcher_token,
        "totals": report["totals"],
        "reconciliation": report["reconciliation"],
        "rule_runs_fired": sum(1 for r in report["rule_runs"] if r["fired"]),
    }
    _echo_doc(summary, ctx.obj["json"])
    if not report["reconciliation"]["match"]:
        raise InfraFailure("fleet/server datapoint reconciliation failed")


# ----------------------------------------------------------------------
# study apply
# ----------------------------------------------------------------------


@cli.group()
def study() -> None:
    """Author studies from declarative manifests."""


def _load_manifest(path: Path) -> dict[str, Any]:
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise click.ClickException(f"unparseable manifest: {exc}")
    if not isinstance(doc, dict):
        raise click.ClickException("manifest must be a mapping")
    schema = json.loads(
        importlib.resources.files("hgdesk")
        .joinpath("resources/manifest.schema.json")
        .read_text()
    )
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "(root)"
        err = ApiError(f"manifest invalid at {where}: {first.message}", code="BAD_MANIFEST")
        err.http_status = 400
        raise err
    return doc


@study.command("apply")
@click.option("--server", default=None)
@click.option("--token", default=None, help="Researcher token (omit to create the study).")
@click.option("--study-id", default=None, help="Existing study to apply into.")
@click.option("--file", "manifest_path", required=True, type=click.Path(path_type=Path))
@click.pass_context
def study_apply(
    ctx: click.Context,
    server: str | None,
    token: str | None,
    study_id: str | None,
    manifest_path: Path,
) -> None:
    """Apply a YAML manifest idempotently; prints the id mapping.

    Without --study-id a new study is created and its researcher token is
    printed once. Re-applying the same manifest with that token creates
    nothing new: subjects match by raw_id, cohorts and test-sets by name,
    tasks and rules by structure.
    """
    manifest = _load_manifest(manifest_path)
    base = _server_of(ctx, server)
    token = _token_of(ctx, token, required=False)
    if (token is None) != (study_id is None):
        raise click.UsageError("--token and --study-id go together")

    api = Api(base, token=None)
    created_study = False
    if study_id is None:
        created = api.request("POST", "/v1/studies", json={"name": manifest["study"]})
        study_id = created["study"]["study_id"]
        token = created["token"]
        created_study = True
    api.close()
    api = Api(base, token=token)

    counts = {"created": 0, "matched": 0}
    mapping: dict[str, Any] = {"study_id": study_id, "subjects": {}, "cohorts": {},
                               "testsets": {}, "tasks": [], "rules": []}
    device_tokens: dict[str, str] = {}

    try:
        vault = {
            row["raw_id"]: row["subject_id"]
            for row in api.request("GET", f"/v1/studies/{study_id}/vault")["entries"]
        }
        for spec_subject in manifest.get("subjects", []):
            raw_id = spec_subject["raw_id"]
            if raw_id in vault:
                mapping["subjects"][raw_id] = vault[raw_id]
                counts["matched"] += 1
                continue
            created = api.request(
                "POST",
                f"/v1/studies/{study_id}/subjects",
                json={"raw_id": raw_id, "attributes": spec_subject.get("attributes", {})},
            )
            subject_id = created["subject"]["subject_id"]
            mapping["subjects"][raw_id] = subject_id
            device_tokens[raw_id] = created["device_token"]
            vault[raw_id] = subject_id
            counts["created"] += 1

        cohorts_by_name = {
            c["name"]: c for c in api.request("GET", f"/v1/studies/{study_id}/cohorts")["cohorts"]
        }
        for spec_cohort in manifest.get("cohorts", []):
            name = spec_cohort["name"]
            if name in cohorts_by_name:
                mapping["cohorts"][name] = cohorts_by_name[name]["cohort_id"]
                counts["matched"] += 1
                continue
            selector = dict(spec_cohort["selector"])
            if selector.get("type") == "explicit":
                raw_ids = selector.pop("member_raw_ids", [])
                missing = [r for r in raw_ids if r not in vault]
                if missing:
                    raise ApiError(
                        f"cohort {name!r} references unenrolled raw ids: {missing}",
                        code="UNKNOWN_MEMBER",
                    )
                selector["member_ids"] = [vault[r] for r in raw_ids]
            created = api.request(
                "POST",
                f"/v1/studies/{study_id}/cohorts",
                json={"name": name, "selector": selector},
            )
            cohorts_by_name[name] = created["cohort"]
            mapping["cohorts"][name] = created["cohort"]["cohort_id"]
            counts["created"] += 1

        testsets_by_name = {
            t["name"]: t
            for t in api.request("GET", f"/v1/studies/{study_id}/testsets")["testsets"]
        }
        for spec_ts in manifest.get("testsets", []):
            name = spec_ts["name"]
            if name in testsets_by_name:
                mapping["testsets"][name] = testsets_by_name[name]["testset_id"]
                counts["matched"] += 1
                continue
            created = api.request(
                "POST",
                f"/v1/studies/{study_id}/testsets",
                json={"name": name, "tests": spec_ts["tests"]},
            )
            testsets_by_name[name] = created["testset"]
            mapping["testsets"][name] = created["testset"]["testset_id"]
            counts["created"] += 1

        def _resolve(name: str, table: Mapping[str, Any], what: str) -> str:
            if name not in table:
                raise ApiError(f"{what} {name!r} is not defined or created", code="NOT_FOUND")
            return table[name]

        existing_tasks = api.request("GET", f"/v1/studies/{study_id}/tasks")["tasks"]
        for spec_task in manifest.get("tasks", []):
            testset_id = _resolve(
                spec_task["testset"],
                {n: t["testset_id"] for n, t in testsets_by_name.items()},
                "testset",
            )
            cohort_id = _resolve(
                spec_task["cohort"],
                {n: c["cohort_id"] for n, c in cohorts_by_name.items()},
                "cohort",
            )
            schedule = dict(spec_task["schedule"])
            schedule.setdefault("window_start", "09:00")
            schedule.setdefault("window_end", "21:00")
            match = next(
                (
                    t
                    for t in existing_tasks
                    if t["testset_id"] == testset_id
                    and t["cohort_id"] == cohort_id
                    and {k: v for k, v in t["schedule"].items() if v is not None} == schedule
                ),
                None,
            )
            if match:
                mapping["tasks"].append(match["task_id"])
                counts["matched"] += 1
                continue
            created = api.request(
                "POST",
                f"/v1/studies/{study_id}/tasks",
                json={"testset_id": testset_id, "cohort_id": cohort_id, "schedule": schedule},
            )
            existing_tasks.append(created["task"])
            mapping["tasks"].append(created["task"]["task_id"])
            counts["created"] += 1

        existing_rules = api.request("GET", f"/v1/studies/{study_id}/rules")["rules"]
        for spec_rule in manifest.get("rules", []):
            action = {
                "source_cohort_id": _resolve(
                    spec_rule["action"]["source_cohort"],
                    {n: c["cohort_id"] for n, c in cohorts_by_name.items()},
                    "cohort",
                ),
                "sub_cohort_name": spec_rule["action"]["sub_cohort_name"],
                "target_testset_id": _resolve(
                    spec_rule["action"]["target_testset"],
                    {n: t["testset_id"] for n, t in testsets_by_name.items()},
                    "testset",
                ),
            }
            match = next(
                (
                    r
                    for r in existing_rules
                    if r["trigger"] == spec_rule["trigger"]
                    and r["predicate"] == spec_rule["predicate"]
                    and r["action"] == action
                ),
                None,
            )
            if match:
                mapping["rules"].append(match["rule_id"])
                counts["matched"] += 1
                continue
            created = api.request(
                "POST",
                f"/v1/studies/{study_id}/rules",
                json={
                    "trigger": spec_rule["trigger"],
                    "predicate": spec_rule["predicate"],
                    "action": action,
                    "active": spec_rule.get("active", True),
                },
            )
            existing_rules.append(created["rule"])
            mapping["rules"].append(created["rule"]["rule_id"])
            counts["created"] += 1
    finally:
        api.close()

    out: dict[str, Any] = {"mapping": mapping, "counts": counts}
    if created_study:
        out["researcher_token"] = token
    if device_tokens:
        out["device_tokens"] = device_tokens
    _echo_doc(out, ctx.obj["json"])


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------


@cli.command()
@click.option("--server", default=None)
@click.option("--token", default=None)
@click.option("--study-id", "study_id", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.pass_context
def export(
    ctx: click.Context, server: str | None, token: str | None, study_id: str, out_dir: Path
) -> None:
    """Write results.csv, datapoints.jsonl, and vault.csv for a study."""
    base = _server_of(ctx, server)
    api = Api(base, token=_token_of(ctx, token))
    try:
        # Fetch everything before writing anything, so a rejected credential
        # (device role, cross-study token) leaves no partial export behind.
        entries = api.request("GET", f"/v1/studies/{study_id}/vault")["entries"]
        results = api.request("GET", f"/v1/studies/{study_id}/results")["results"]
        datapoints = api.request("GET", f"/v1/studies/{study_id}/datapoints")["datapoints"]
    finally:
        api.close()

    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.csv"
    with results_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject_id", "worker_kind", "metric", "value", "produced_at",
             "result_id", "datapoint_id", "dataset_id"]
        )
        rows = 0
        for result in results:
            for metric in METRICS_BY_WORKER_KIND.get(result["worker_kind"], ()):
                value = result["body"].get(metric)
                writer.writerow(
                    [result["subject_id"], result["worker_kind"], metric,
                     "" if value is None else value, result["produced_at"],
                     result["result_id"], result["datapoint_id"], result["dataset_id"]]
                )
                rows += 1

    dp_path = out_dir / "datapoints.jsonl"
    with dp_path.open("w") as fh:
        for doc in datapoints:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")

    vault_path = out_dir / "vault.csv"
    with vault_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["raw_id", "subject_id"])
        for entry in entries:
            writer.writerow([entry["raw_id"], entry["subject_id"]])
    _echo_doc(
        {
            "results_csv": {"path": str(results_path), "rows": rows},
            "datapoints_jsonl": {"path": str(dp_path), "rows": len(datapoints)},
            "vault_csv": {"path": str(vault_path), "rows": len(entries)},
        },
        ctx.obj["json"],
    )


# ----------------------------------------------------------------------
# queue inspect
# ----------------------------------------------------------------------


@cli.group()
def queue() -> None:
    """Inspect the analytics job queue."""


@queue.command("inspect")
@click.option("--server", default=None)
@click.option("--token", default=None)
@click.option("--state", default=None, type=click.Choice(["ready", "leased", "done", "dead"]))
@click.option("--kind", default=None, type=click.Choice(list(ALL_KINDS)))
@click.pass_context
def queue_inspect(
    ctx: click.Context,
    server: str | None,
    token: str | None,
    state: str | None,
    kind: str | None,
) -> None:
    """Show queue totals and (optionally filtered) jobs."""
    base = _server_of(ctx, server)
    api = Api(base, token=_token_of(ctx, token))
    try:
        stats = api.request("GET", "/v1/queue/stats")
        params: dict[str, str] = {}
        if state:
            params["state"] = state
        if kind:
            params["worker_kind"] = kind
        jobs = api.request("GET", "/v1/queue/jobs", params=params)["jobs"]
    finally:
        api.close()
    if ctx.obj["json"]:
        _echo_doc({"stats": stats, "jobs": jobs}, True)
        return
    click.echo("totals: " + "  ".join(f"{k}={v}" for k, v in sorted(stats["totals"].items())))
    for worker_kind, states in sorted(stats["by_kind"].items()):
        click.echo(
            f"  {worker_kind}: " + "  ".join(f"{k}={v}" for k, v in sorted(states.items()))
        )
    for job in jobs:
        click.echo(
            f"{job['job_id']}  {job['worker_kind']:<12} {job['state']:<7} "
            f"attempts={job['attempts']}/{job['max_retries'] + 1}  {job['dataset_id']}"
        )


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="hg", standalone_mode=False)
        return EXIT_OK
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except InfraFailure as exc:
        exc.show()
        return EXIT_INFRA
    except click.exceptions.Exit as exc:  # --help / --version
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except httpx.TransportError as exc:
        click.echo(f"error: server unreachable: {exc}", err=True)
        return EXIT_INFRA
    except ApiError as exc:
        click.echo(f"error [{exc.code}]: {exc.message}", err=True)
        if exc.details:
            click.echo(json.dumps(exc.details, indent=2, sort_keys=True), err=True)
        return EXIT_INFRA if exc.http_status >= 500 else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
