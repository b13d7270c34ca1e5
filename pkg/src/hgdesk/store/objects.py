"""Content-addressed object store for file payloads.

Objects live at ``<root>/<first two hex chars>/<sha256 hex>``; the digest is
the identity, so identical uploads deduplicate for free and reads verify the
bytes against the address.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from hgdesk.domain.entities import ObjectRef
from hgdesk.errors import ApiError, NotFound

__all__ = ["ObjectStore", "CorruptObject"]


class CorruptObject(ApiError):
    code = "CORRUPT_OBJECT"
    http_status = 500


class ObjectStore:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def put(self, content: bytes, media_type: str = "application/octet-stream") -> ObjectRef:
        digest = hashlib.sha256(content).hexdigest()
        path = self._path(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(content)
            tmp.replace(path)
        return ObjectRef(sha256=digest, size_bytes=len(content), media_type=media_type)

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        if not path.exists():
            raise NotFound(f"object {digest} not found")
        content = path.read_bytes()
        actual = hashlib.sha256(content).hexdigest()
        if actual != digest:
            raise CorruptObject(f"object {digest} fails digest verification")
        return content

    def exists(self, digest: str) -> bool:
        return self._path(digest).exists()
