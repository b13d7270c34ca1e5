"""Shared data-preparation utilities: pseudonymization, gap handling,
stream synchronization, scalar aggregation."""

from hgdesk.dataprep.pseudo import pseudonym_for
from hgdesk.dataprep.series import (
    ImputedSeries,
    Sample,
    impute_gaps,
    interpolate_at,
    synchronize,
)
from hgdesk.dataprep.aggregate import ScalarPoint, aggregate

__all__ = [
    "pseudonym_for",
    "Sample",
    "ImputedSeries",
    "impute_gaps",
    "interpolate_at",
    "synchronize",
    "ScalarPoint",
    "aggregate",
]
