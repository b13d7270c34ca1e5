"""Error taxonomy shared across the service, store, queue, and workers.

Every caller-facing failure carries a machine-readable ``code``; the HTTP
layer renders it as ``{"code": ..., "message": ...}`` with the matching
status.
"""
from __future__ import annotations

from typing import Any

__all__ = [
    "ApiError",
    "NotFound",
    "Forbidden",
    "Unauthorized",
    "Conflict",
    "ValidationFailed",
    "SchemaMismatch",
    "StaleLease",
    "AnalyticError",
    "error_from_wire",
]


class ApiError(Exception):
    """Base class: code + human message + HTTP status."""

    code = "INTERNAL"
    http_status = 500

    def __init__(self, message: str = "", *, code: str | None = None, details: Any = None):
        super().__init__(message or self.__class__.code)
        if code is not None:
            self.code = code
        self.message = message or self.code
        self.details = details

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.details is not None:
            doc["details"] = self.details
        return doc


class NotFound(ApiError):
    code = "NOT_FOUND"
    http_status = 404


class Unauthorized(ApiError):
    code = "UNAUTHORIZED"
    http_status = 401


class Forbidden(ApiError):
    code = "FORBIDDEN"
    http_status = 403


class Conflict(ApiError):
    code = "CONFLICT"
    http_status = 409


class ValidationFailed(ApiError):
    """400 with the violated invariant codes attached."""

    code = "VALIDATION"
    http_status = 400

    @classmethod
    def from_violations(cls, violations) -> "ValidationFailed":
        first = violations[0]
        err = cls(first.message or first.code, details=[v.to_doc() for v in violations])
        err.code = first.code
        return err


class SchemaMismatch(ApiError):
    code = "SCHEMA_MISMATCH"
    http_status = 400


class StaleLease(ApiError):
    code = "STALE_LEASE"
    http_status = 409


class AnalyticError(ApiError):
    """Raised by analytics on malformed/insufficient input; job-level failure."""

    code = "ANALYTIC"
    http_status = 422


_WIRE_CLASSES: dict[str, type[ApiError]] = {
    cls.code: cls
    for cls in (NotFound, Unauthorized, Forbidden, Conflict, SchemaMismatch, StaleLease)
}


def error_from_wire(status: int, doc: Any) -> ApiError:
    """Rebuild the matching exception from an error response document."""
    if not isinstance(doc, dict):
        doc = {}
    code = doc.get("code")
    cls = _WIRE_CLASSES.get(code, ValidationFailed if status == 400 else ApiError)
    err = cls(doc.get("message", ""), code=code, details=doc.get("details"))
    err.http_status = status
    return err
