"""Reusable analytic-worker loop and queue/datastore clients."""
from hgdesk.workers.kit import (
    AnalyticFn,
    DatasetBundle,
    HttpWorkerClient,
    LocalWorkerClient,
    RunReport,
    WorkerDescriptor,
    builtin_worker,
    run_until_drained,
    run_worker,
)

__all__ = [
    "AnalyticFn",
    "DatasetBundle",
    "WorkerDescriptor",
    "RunReport",
    "LocalWorkerClient",
    "HttpWorkerClient",
    "builtin_worker",
    "run_worker",
    "run_until_drained",
]
