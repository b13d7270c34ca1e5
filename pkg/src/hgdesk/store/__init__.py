"""Persistence: embedded relational store + content-addressed object store."""

from hgdesk.store.database import Database
from hgdesk.store.objects import ObjectStore
from hgdesk.store.datastore import Datastore, UploadEnvelope

__all__ = ["Database", "ObjectStore", "Datastore", "UploadEnvelope"]
