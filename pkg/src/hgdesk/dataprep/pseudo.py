"""Deterministic pseudonyms for subject identifiers.

A study-scoped secret salt keys an HMAC-SHA-256 over the raw identifier; the
first 16 bytes, base32-encoded lowercase, become the pseudonym token.  The
result is shaped exactly like a minted subject id (``sub_`` + 26 chars), so
pseudonymous ids are indistinguishable from random ones downstream.
"""
from __future__ import annotations

import base64
import hashlib
import hmac

__all__ = ["pseudonym_for"]

_TOKEN_BYTES = 16


def pseudonym_for(salt: bytes, raw_id: str) -> str:
    """Map a raw identifier to its stable pseudonym under ``salt``."""
    if not isinstance(salt, (bytes, bytearray)) or len(salt) == 0:
        raise ValueError("salt must be non-empty bytes")
    if not isinstance(raw_id, str) or not raw_id:
        raise ValueError("raw_id must be a non-empty string")
    digest = hmac.new(salt, raw_id.encode("utf-8"), hashlib.sha256).digest()
    token = base64.b32encode(digest[:_TOKEN_BYTES]).decode("ascii").rstrip("=").lower()
    return f"sub_{token}"
