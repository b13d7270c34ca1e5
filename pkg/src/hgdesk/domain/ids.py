"""Prefixed opaque identifiers.

Every persisted entity gets an id of the form ``<prefix>_<token>`` where the
token is 26 lowercase base32 characters (128 random bits).  The prefix makes
ids self-describing in logs and exports; the token carries no structure.
"""
from __future__ import annotations

import base64
import re
import secrets
from typing import Callable, Final

__all__ = ["ID_PREFIXES", "new_id", "is_valid_id", "kind_of_id"]

# One prefix per persisted entity kind.
ID_PREFIXES: Final[dict[str, str]] = {
    "study": "stu",
    "subject": "sub",
    "cohort": "coh",
    "testset": "tst",
    "test": "tse",
    "task": "tsk",
    "occurrence": "occ",
    "datapoint": "dp",
    "dataset": "ds",
    "result": "res",
    "job": "job",
    "rule": "rul",
    "device": "dev",  # device handle bound to a subject; not a stored entity
}

_PREFIX_TO_KIND: Final[dict[str, str]] = {v: k for k, v in ID_PREFIXES.items()}

_TOKEN_BYTES: Final[int] = 16  # 128 bits -> exactly 26 base32 chars
_ID_RE: Final[re.Pattern[str]] = re.compile(r"^([a-z]{2,3})_([a-z2-7]{26})$")


def new_id(entity_kind: str, randbytes: Callable[[int], bytes] = secrets.token_bytes) -> str:
    """Mint a fresh identifier for ``entity_kind``.

    ``randbytes`` is injectable so tests can exercise collision behaviour
    deterministically.
    """
    try:
        prefix = ID_PREFIXES[entity_kind]
    except KeyError:
        raise ValueError(f"unknown entity kind: {entity_kind!r}") from None
    raw = randbytes(_TOKEN_BYTES)
    if len(raw) != _TOKEN_BYTES:
        raise ValueError(f"randbytes returned {len(raw)} bytes, expected {_TOKEN_BYTES}")
    token = base64.b32encode(raw).decode("ascii").rstrip("=").lower()
    return f"{prefix}_{token}"


def is_valid_id(value: str, entity_kind: str | None = None) -> bool:
    """Check shape (and optionally kind) of an identifier string."""
    m = _ID_RE.match(value)
    if not m:
        return False
    prefix = m.group(1)
    if prefix not in _PREFIX_TO_KIND:
        return False
    if entity_kind is not None and ID_PREFIXES.get(entity_kind) != prefix:
        return False
    return True


def kind_of_id(value: str) -> str | None:
    """Return the entity kind encoded in ``value``'s prefix, or None."""
    m = _ID_RE.match(value)
    if not m:
        return None
    return _PREFIX_TO_KIND.get(m.group(1))
