"""Clinical task manager: service operations, rules, scheduler, HTTP API."""
from hgdesk.ctm.api import Runtime, ServiceConfig, build_runtime, create_app
from hgdesk.ctm.rules import evaluate_rule
from hgdesk.ctm.scheduler import Scheduler
from hgdesk.ctm.service import CtmService

__all__ = [
    "CtmService",
    "Runtime",
    "Scheduler",
    "ServiceConfig",
    "build_runtime",
    "create_app",
    "evaluate_rule",
]
