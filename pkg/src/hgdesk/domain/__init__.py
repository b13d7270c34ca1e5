"""Domain model: entity types, identifiers, timestamps, validation."""

from hgdesk.domain.ids import ID_PREFIXES, is_valid_id, new_id
from hgdesk.domain.timefmt import (
    at_time_of_day,
    day_bounds_ms,
    day_of_ms,
    fmt_ms,
    parse_day,
    parse_ms,
)
from hgdesk.domain.entities import (
    AnalyticResult,
    Cohort,
    Datapoint,
    Dataset,
    ObjectRef,
    OccurrenceStatus,
    Payload,
    Rule,
    Schedule,
    Study,
    Subject,
    Task,
    TaskOccurrence,
    Test,
    TestSet,
    canonical_json,
)
from hgdesk.domain.validation import Violation, validate_entity

__all__ = [
    "ID_PREFIXES",
    "new_id",
    "is_valid_id",
    "fmt_ms",
    "parse_ms",
    "day_of_ms",
    "day_bounds_ms",
    "parse_day",
    "at_time_of_day",
    "Study",
    "Subject",
    "Cohort",
    "TestSet",
    "Test",
    "Task",
    "Schedule",
    "TaskOccurrence",
    "OccurrenceStatus",
    "Datapoint",
    "Dataset",
    "AnalyticResult",
    "Rule",
    "Payload",
    "ObjectRef",
    "canonical_json",
    "Violation",
    "validate_entity",
]
