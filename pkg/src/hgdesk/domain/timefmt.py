"""UTC timestamp conventions.

All timestamps are integer epoch milliseconds in memory and ISO-8601 with
millisecond precision and a trailing ``Z`` on the wire and in storage, e.g.
``2024-01-15T09:30:00.000Z``.  Calendar days and day windows are UTC.
"""
from __future__ import annotations

import re
from datetime import date, datetime, timedelta, timezone
from typing import Final

__all__ = [
    "fmt_ms",
    "parse_ms",
    "day_of_ms",
    "parse_day",
    "day_bounds_ms",
    "at_time_of_day",
    "parse_time_of_day",
    "MS_PER_DAY",
]

MS_PER_DAY: Final[int] = 86_400_000

_EPOCH: Final[datetime] = datetime(1970, 1, 1, tzinfo=timezone.utc)
_DAY_RE: Final[re.Pattern[str]] = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_TOD_RE: Final[re.Pattern[str]] = re.compile(r"^(\d{2}):(\d{2})(?::(\d{2}))?$")


def fmt_ms(epoch_ms: int) -> str:
    """Render epoch milliseconds as canonical ISO-8601 (``...sss Z``)."""
    secs, msec = divmod(int(epoch_ms), 1000)
    dt = _EPOCH + timedelta(seconds=secs)
    return f"{dt:%Y-%m-%dT%H:%M:%S}.{msec:03d}Z"


def parse_ms(text: str) -> int:
    """Parse an ISO-8601 timestamp to epoch milliseconds (exact integer math)."""
    if not isinstance(text, str) or not text:
        raise ValueError(f"bad timestamp: {text!r}")
    normalized = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
    try:
        dt = datetime.fromisoformat(normalized)
    except ValueError:
        raise ValueError(f"bad timestamp: {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - _EPOCH
    return delta // timedelta(milliseconds=1)


def day_of_ms(epoch_ms: int) -> str:
    """UTC calendar day (``YYYY-MM-DD``) containing the timestamp."""
    secs = int(epoch_ms) // 1000
    return f"{_EPOCH + timedelta(seconds=secs):%Y-%m-%d}"


def parse_day(text: str) -> date:
    if not isinstance(text, str) or not _DAY_RE.match(text):
        raise ValueError(f"bad day: {text!r}")
    return date.fromisoformat(text)


def day_bounds_ms(day: str) -> tuple[int, int]:
    """[start, end) epoch-ms bounds of a UTC calendar day."""
    d = parse_day(day)
    start = (datetime(d.year, d.month, d.day, tzinfo=timezone.utc) - _EPOCH) // timedelta(
        milliseconds=1
    )
    return start, start + MS_PER_DAY


def parse_time_of_day(text: str) -> int:
    """Parse ``HH:MM`` / ``HH:MM:SS`` to milliseconds after midnight."""
    m = _TOD_RE.match(text) if isinstance(text, str) else None
    if not m:
        raise ValueError(f"bad time of day: {text!r}")
    hh, mm, ss = int(m.group(1)), int(m.group(2)), int(m.group(3) or 0)
    if hh > 23 or mm > 59 or ss > 59:
        raise ValueError(f"bad time of day: {text!r}")
    return ((hh * 60 + mm) * 60 + ss) * 1000


def at_time_of_day(day: str, time_of_day: str) -> int:
    """Epoch ms of ``time_of_day`` (``HH:MM[:SS]``) on UTC calendar ``day``."""
    start, _ = day_bounds_ms(day)
    return start + parse_time_of_day(time_of_day)
