"""Bearer-token authentication and study-scoped authorization.

Researcher and device tokens are confined to their study; worker tokens
serve the deployment's internal endpoints (queue, result submission) and
are not study-scoped. Cross-study access is always FORBIDDEN, never
silently empty.
"""
from __future__ import annotations

from hgdesk.errors import Forbidden, Unauthorized
from hgdesk.store.datastore import Credential, Datastore

__all__ = ["authenticate", "require_role", "require_study"]


def authenticate(store: Datastore, authorization: str | None) -> Credential:
    """Resolve an ``Authorization: Bearer <token>`` header to a credential."""
    if not authorization:
        raise Unauthorized("missing authorization header")
    parts = authorization.split(None, 1)
    if len(parts) != 2 or parts[0].lower() != "bearer" or not parts[1].strip():
        raise Unauthorized("authorization header must be 'Bearer <token>'")
    credential = store.resolve_credential(parts[1].strip())
    if credential is None:
        raise Unauthorized("unknown or revoked token")
    return credential


def require_role(credential: Credential, *roles: str) -> None:
    if credential.role not in roles:
        raise Forbidden(f"requires role {' or '.join(roles)}, token has {credential.role}")


def require_study(credential: Credential, study_id: str) -> None:
    """Workers pass; researcher/device tokens must belong to the study."""
    if credential.role == "worker":
        return
    if credential.study_id != study_id:
        raise Forbidden("credential is scoped to another study")
