"""Local-day arithmetic shared by every stage that buckets timestamps."""
from __future__ import annotations

import re
from datetime import date, datetime, timedelta, timezone

import numpy as np

EPOCH = date(1970, 1, 1)
DAY = 86_400

DEFAULT_TZ = "+03:00"

_OFFSET_RE = re.compile(r"^(?:UTC)?([+-])(\d{1,2}):?(\d{2})?$")


def parse_offset(spec: str | int | timezone) -> int:
    """UTC offset in seconds from ``"+03:00"``, ``"UTC-5"``, ``"Z"`` or seconds."""
    if isinstance(spec, timezone):
        return int(spec.utcoffset(None).total_seconds())
    if isinstance(spec, int):
        return spec
    s = spec.strip()
    if s in ("Z", "UTC", "+00:00"):
        return 0
    m = _OFFSET_RE.match(s)
    if not m:
        raise ValueError(f"unrecognised UTC offset {spec!r}")
    sign = -1 if m.group(1) == "-" else 1
    hours, minutes = int(m.group(2)), int(m.group(3) or 0)
    if hours > 14 or minutes >= 60:
        raise ValueError(f"UTC offset out of range: {spec!r}")
    return sign * (hours * 3600 + minutes * 60)


def day_number(ts, offset: int):
    """Days since 1970-01-01 of the local date; works on ints and int arrays."""
    if isinstance(ts, np.ndarray):
        return (ts + offset) // DAY
    return (int(ts) + offset) // DAY


def local_date(ts: int, offset: int) -> date:
    return EPOCH + timedelta(days=day_number(ts, offset))


def date_number(d: date) -> int:
    return (d - EPOCH).days


def number_date(n: int) -> date:
    return EPOCH + timedelta(days=int(n))


def day_start(d: date, offset: int) -> int:
    """Epoch seconds of local midnight starting ``d``."""
    return date_number(d) * DAY - offset


def day_end(d: date, offset: int) -> int:
    """Last epoch second belonging to local date ``d``."""
    return day_start(d, offset) + DAY - 1


def date_range(start: date, end: date) -> list[date]:
    return [start + timedelta(days=i) for i in range((end - start).days + 1)]


def iso_week(d: date) -> str:
    year, week, _ = d.isocalendar()
    return f"{year}-W{week:02d}"


def to_date(value) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    return date.fromisoformat(str(value))
