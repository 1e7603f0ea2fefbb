"""Daily placements, lost subscribers and the aggregates built on them.

The per-subscriber functions (:func:`daily_placement`, :func:`build_series`)
state the rules directly on event lists. :func:`build_placements` applies the
same rules to a whole :class:`~border_flux.ingest.EventTable` at once and is
what the pipeline uses; the two are cross-checked in the test-suite.

Rules:

* a local day is a 24-hour block in the configured UTC offset;
* a subscriber is placed, for each day with events, in the area whose cells
  saw most of that day's events. Ties go to the area of the chronologically
  last event among the tied areas, and when even that second is shared, to the
  alphabetically last area code;
* silent days between two observed days carry the last observed area;
* a subscriber silent from some day until the horizon end is lost from that
  day on, and has no placements after the last observed day.
"""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import CellRegistry, EventTable, IngestError, MobilityClass, XdrEvent
from .timeutil import DAY, DEFAULT_TZ, date_number, date_range, day_end, day_start, local_date, parse_offset

log = logging.getLogger(__name__)

LOST = "LOST"
UNOBSERVED = "UNOBSERVED"

DEFAULT_HORIZON = (date(2020, 2, 28), date(2020, 6, 15))

# sentinel codes inside state matrices
NO_OBS = -1
LOST_CODE = -2
UNSEEN_CODE = -3

# events per placement block
PLACEMENT_BLOCK = 1 << 21


class Status(str, Enum):
    OBSERVED = "Observed"
    CARRIED = "Carried"


@dataclass
class PlacementSeries:
    subscriber_id: str
    first_obs: date
    last_obs: date
    placements: dict[date, tuple[str, Status]]
    lost: bool
    lost_date: date | None = None

    def area_on(self, d: date) -> str | None:
        p = self.placements.get(d)
        return p[0] if p else None


# ----------------------------------------------------------------------------
# per-subscriber reference rules


def daily_placement(events: Sequence[XdrEvent], registry: CellRegistry, level: str = "province") -> str:
    """Area with most of one subscriber's events on one day."""
    if not events:
        raise ValueError("daily_placement needs at least one event")
    count: Counter[str] = Counter()
    last_ts: dict[str, int] = {}
    for e in events:
        a = registry.area_of(e.cell_id, level)
        count[a] += 1
        last_ts[a] = max(last_ts.get(a, e.ts), e.ts)
    return max(count, key=lambda a: (count[a], last_ts[a], a))


def build_series(
    events: Iterable[XdrEvent],
    registry: CellRegistry,
    horizon: tuple[date, date] = DEFAULT_HORIZON,
    *,
    tz: str | int = DEFAULT_TZ,
    level: str = "province",
) -> PlacementSeries | None:
    """Placement series of a single subscriber; ``None`` if silent over the horizon."""
    offset = parse_offset(tz)
    lo, hi = day_start(horizon[0], offset), day_end(horizon[1], offset)
    by_day: dict[date, list[XdrEvent]] = defaultdict(list)
    sub = None
    for e in events:
        sub = sub or e.subscriber_id
        if lo <= e.ts <= hi:
            by_day[local_date(e.ts, offset)].append(e)
    if not by_day:
        if sub is not None:
            log.warning("subscriber %s has no events in the horizon; excluded", sub)
        return None
    days = sorted(by_day)
    first, last = days[0], days[-1]
    placements: dict[date, tuple[str, Status]] = {}
    current = None
    for d in date_range(first, last):
        if d in by_day:
            current = daily_placement(by_day[d], registry, level)
            placements[d] = (current, Status.OBSERVED)
        else:
            placements[d] = (current, Status.CARRIED)
    lost = last < horizon[1]
    return PlacementSeries(
        by_day[first][0].subscriber_id, first, last, placements, lost,
        last + timedelta(days=1) if lost else None,
    )


# ----------------------------------------------------------------------------
# vectorised placement matrix


@dataclass
class PlacementMatrix:
    """Observed daily areas for many subscribers over one horizon.

    ``observed[i, d]`` is the area code placed from events on day ``d`` or -1.
    Rows are subscribers with at least one event in the horizon, sorted by id.
    """

    sub_ids: list[str]
    start: date
    areas: list[str]
    observed: np.ndarray
    excluded: list[str] = field(default_factory=list)

    def __post_init__(self):
        has = self.observed >= 0
        n_days = self.observed.shape[1]
        if len(self.sub_ids) and not has.any(axis=1).all():
            raise ValueError("every row needs at least one observed day")
        self.first = has.argmax(axis=1).astype(np.int32)
        self.last = (n_days - 1 - has[:, ::-1].argmax(axis=1)).astype(np.int32)
        self._row = {s: i for i, s in enumerate(self.sub_ids)}
        self._states: dict[bool, np.ndarray] = {}

    @property
    def n_days(self) -> int:
        return self.observed.shape[1]

    @property
    def end(self) -> date:
        return self.start + timedelta(days=self.n_days - 1)

    @property
    def dates(self) -> list[date]:
        return date_range(self.start, self.end)

    @property
    def lost(self) -> np.ndarray:
        return self.last < self.n_days - 1

    def day_index(self, d: date) -> int:
        i = (d - self.start).days
        if not 0 <= i < self.n_days:
            raise ValueError(f"{d} outside horizon {self.start}..{self.end}")
        return i

    def row(self, subscriber_id: str) -> int:
        return self._row[subscriber_id]

    def filled(self, rows=slice(None)) -> np.ndarray:
        """Observed plus carried areas; -1 outside ``[first, last]``."""
        obs = np.atleast_2d(self.observed[rows])
        idx = np.where(obs >= 0, np.arange(obs.shape[1], dtype=np.int32), -1)
        np.maximum.accumulate(idx, axis=1, out=idx)
        out = np.take_along_axis(obs, np.maximum(idx, 0), axis=1)
        out[idx < 0] = NO_OBS
        return out

    def state(self, backfill: bool = True) -> np.ndarray:
        """Area code per member-day, with LOST after the last observation.

        Days before the first observation take the first observed area when
        ``backfill`` is set, else :data:`UNSEEN_CODE`. The result is cached
        and read-only.
        """
        if backfill not in self._states:
            out = self._compute_state(backfill)
            out.setflags(write=False)
            self._states[backfill] = out
        return self._states[backfill]

    def _compute_state(self, backfill: bool) -> np.ndarray:
        out = self.filled()
        n, m = out.shape
        if n == 0:
            return out
        days = np.arange(m, dtype=np.int32)
        before = days[None, :] < self.first[:, None]
        if backfill:
            first_area = self.observed[np.arange(n), self.first]
            out = np.where(before, first_area[:, None], out)
        else:
            out[before] = UNSEEN_CODE
        out[days[None, :] > self.last[:, None]] = LOST_CODE
        return out

    def series(self, subscriber_id: str) -> PlacementSeries:
        i = self._row[subscriber_id]
        f, l = int(self.first[i]), int(self.last[i])
        filled = self.filled(slice(i, i + 1))[0]
        placements = {}
        for d in range(f, l + 1):
            status = Status.OBSERVED if self.observed[i, d] >= 0 else Status.CARRIED
            placements[self.start + timedelta(days=d)] = (self.areas[filled[d]], status)
        lost = l < self.n_days - 1
        return PlacementSeries(
            subscriber_id, self.start + timedelta(days=f), self.start + timedelta(days=l),
            placements, lost, self.start + timedelta(days=l + 1) if lost else None,
        )

    def subset(self, members: Iterable[str]) -> "PlacementMatrix":
        rows = sorted(self._row[s] for s in members if s in self._row)
        return PlacementMatrix(
            [self.sub_ids[r] for r in rows], self.start, self.areas, self.observed[rows], self.excluded
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh, sub_ids=np.asarray(self.sub_ids, dtype=str), start=np.array(date_number(self.start)),
                areas=np.asarray(self.areas, dtype=str), observed=self.observed,
                excluded=np.asarray(self.excluded, dtype=str),
            )

    @classmethod
    def load(cls, path) -> "PlacementMatrix":
        with np.load(path, allow_pickle=False) as z:
            from .timeutil import number_date

            return cls(
                z["sub_ids"].tolist(), number_date(int(z["start"])), z["areas"].tolist(),
                z["observed"], z["excluded"].tolist(),
            )


def _place_chunk(rows, days, secs, areas, n_days, n_areas, row_lo, n_rows) -> np.ndarray:
    """Majority area per (row, day) for one block of rows."""
    out = np.full((n_rows, n_days), NO_OBS, dtype=np.int32)
    if len(rows) == 0:
        return out
    key = ((rows - row_lo).astype(np.int64) * n_days + days) * n_areas + areas
    combined = np.sort(key * DAY + secs)
    key_sorted = combined // DAY
    ends = np.flatnonzero(np.diff(key_sorted)) if len(key_sorted) > 1 else np.zeros(0, np.int64)
    ends = np.append(ends, len(key_sorted) - 1)
    starts = np.concatenate(([0], ends[:-1] + 1))
    group_key = key_sorted[ends]
    count = ends - starts + 1
    last_sec = combined[ends] % DAY
    area = group_key % n_areas
    rowday = group_key // n_areas
    order = np.lexsort((area, last_sec, count, rowday))
    rowday_o = rowday[order]
    is_last = np.append(rowday_o[1:] != rowday_o[:-1], True)
    win = order[is_last]
    out.reshape(-1)[rowday[win]] = area[win]
    return out


def build_placements(
    table: EventTable,
    registry: CellRegistry,
    horizon: tuple[date, date] = DEFAULT_HORIZON,
    *,
    members: Iterable[str] | None = None,
    tz: str | int = DEFAULT_TZ,
    level: str = "province",
    workers: int = 1,
) -> PlacementMatrix:
    """Placement matrix for ``members`` (default: every subscriber in ``table``).

    ``workers`` splits subscribers into contiguous blocks placed in parallel;
    the result does not depend on it.
    """
    offset = parse_offset(tz)
    start, end = horizon
    n_days = (end - start).days + 1
    if n_days < 1:
        raise ValueError(f"empty horizon {start}..{end}")
    lo, hi = day_start(start, offset), day_end(end, offset)

    wanted = sorted(set(members)) if members is not None else table.sub_ids.tolist()
    sub_index = {s: i for i, s in enumerate(table.sub_ids.tolist())}
    cell_area, areas = registry.area_lookup(table.cell_ids.tolist(), level)
    n_areas = max(len(areas), 1)

    rowmap = np.full(len(table.sub_ids), -1, dtype=np.int64)
    candidates = [s for s in wanted if s in sub_index]
    for r, s in enumerate(candidates):
        rowmap[sub_index[s]] = r
    never = [s for s in wanted if s not in sub_index]

    if len(table):
        mask = (table.ts >= lo) & (table.ts <= hi)
        mask &= rowmap[table.sub] >= 0
        rows = rowmap[table.sub[mask]].astype(np.int32)
        ev_area = cell_area[table.cell[mask]]
        if (ev_area < 0).any():
            bad = sorted(set(table.cell_ids[table.cell[mask][ev_area < 0]].tolist()))
            raise IngestError(f"cell id(s) missing from registry: {bad[:10]}")
        local = table.ts[mask] + offset
        del mask
        days = (local // DAY - date_number(start)).astype(np.int32)
        secs = (local % DAY).astype(np.int32)
        del local
        if len(rows) > 1 and (rows[1:] < rows[:-1]).any():
            order = np.argsort(rows, kind="stable")
            rows, days, secs, ev_area = rows[order], days[order], secs[order], ev_area[order]
            del order
    else:
        rows = days = secs = ev_area = np.zeros(0, np.int32)

    # Blocks of whole subscribers keep the sort buffers small; their number
    # depends only on the data, so the thread count never changes the result.
    n = len(candidates)
    n_blocks = max(1, min(n, -(-len(rows) // PLACEMENT_BLOCK)))
    bounds = np.linspace(0, n, n_blocks + 1).astype(np.int64)
    cuts = np.searchsorted(rows, bounds)

    def job(j):
        a, b = cuts[j], cuts[j + 1]
        return _place_chunk(
            rows[a:b], days[a:b], secs[a:b], ev_area[a:b], n_days, n_areas, bounds[j], bounds[j + 1] - bounds[j],
        )

    workers = max(1, min(int(workers), n_blocks))
    if workers == 1:
        parts = [job(j) for j in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(n_blocks)))
    observed = np.concatenate(parts, axis=0) if parts else np.zeros((0, n_days), np.int32)
    del parts

    seen = (observed >= 0).any(axis=1)
    silent = [s for s, ok in zip(candidates, seen.tolist()) if not ok]
    excluded = sorted(never + silent)
    if excluded:
        log.warning("%d subscriber(s) without events in the horizon excluded", len(excluded))
    kept = [s for s, ok in zip(candidates, seen.tolist()) if ok]
    return PlacementMatrix(kept, start, list(areas), observed[seen], excluded)


# ----------------------------------------------------------------------------
# aggregates


GROUP_COLUMNS = ("visa_border", "visa_other", "novisa_border", "novisa_other", "lost")


@dataclass
class GroupSeries:
    dates: list[date]
    visa_border: np.ndarray
    visa_other: np.ndarray
    novisa_border: np.ndarray
    novisa_other: np.ndarray
    lost: np.ndarray
    unplaced: np.ndarray

    def row(self, d: date) -> tuple[int, int, int, int, int]:
        i = self.dates.index(d)
        return tuple(int(getattr(self, c)[i]) for c in GROUP_COLUMNS)

    def rows(self) -> list[tuple]:
        cols = [getattr(self, c) for c in GROUP_COLUMNS]
        return [(d, *(int(c[i]) for c in cols)) for i, d in enumerate(self.dates)]

    def totals(self) -> np.ndarray:
        return sum(getattr(self, c) for c in GROUP_COLUMNS) + self.unplaced

    def active(self) -> dict[date, int]:
        """Members placed (not lost) per date."""
        placed = self.visa_border + self.visa_other + self.novisa_border + self.novisa_other
        return dict(zip(self.dates, placed.tolist()))


def _area_mask(areas: Sequence[str], chosen: Iterable[str]) -> np.ndarray:
    chosen = set(chosen)
    return np.array([a in chosen for a in areas], dtype=bool)


def group_timeseries(
    pm: PlacementMatrix,
    class_of: Mapping[str, MobilityClass],
    border_areas: Iterable[str],
    *,
    backfill: bool = True,
) -> GroupSeries:
    """Per-date counts of Visa/NoVisa members at the border, elsewhere, and lost."""
    state = pm.state(backfill)
    is_border = np.append(_area_mask(pm.areas, border_areas), False)
    cls = [class_of.get(s) for s in pm.sub_ids]
    out = {}
    zeros = np.zeros(pm.n_days, dtype=np.int64)
    for name, c in (("visa", MobilityClass.VISA), ("novisa", MobilityClass.NO_VISA)):
        rows = state[np.array([x == c for x in cls], dtype=bool)] if len(cls) else state[:0]
        placed = rows >= 0
        border = placed & is_border[np.where(placed, rows, -1)]
        out[f"{name}_border"] = border.sum(axis=0).astype(np.int64) if len(rows) else zeros.copy()
        out[f"{name}_other"] = (placed & ~border).sum(axis=0).astype(np.int64) if len(rows) else zeros.copy()
    in_cohort = np.array([c in (MobilityClass.VISA, MobilityClass.NO_VISA) for c in cls], dtype=bool)
    st = state[in_cohort] if len(cls) else state[:0]
    lost = (st == LOST_CODE).sum(axis=0).astype(np.int64) if len(st) else zeros.copy()
    unplaced = (st == UNSEEN_CODE).sum(axis=0).astype(np.int64) if len(st) else zeros.copy()
    return GroupSeries(pm.dates, out["visa_border"], out["visa_other"], out["novisa_border"], out["novisa_other"], lost, unplaced)


@dataclass
class AreaCounts:
    date: date
    counts: dict[str, int]
    lost: int
    unplaced: int = 0


def province_counts(pm: PlacementMatrix, d: date, *, backfill: bool = True) -> AreaCounts:
    """Non-lost members per area on ``d``; lost members reported separately."""
    col = pm.state(backfill)[:, pm.day_index(d)]
    placed = col[col >= 0]
    counts = np.bincount(placed, minlength=len(pm.areas)) if len(placed) else np.zeros(len(pm.areas), int)
    return AreaCounts(
        d,
        {a: int(n) for a, n in zip(pm.areas, counts.tolist()) if n},
        int((col == LOST_CODE).sum()),
        int((col == UNSEEN_CODE).sum()),
    )


@dataclass
class FlowMatrix:
    date_a: date
    date_b: date
    counts: dict[tuple[str, str], int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def row_sums(self) -> dict[str, int]:
        out: Counter[str] = Counter()
        for (o, _), n in self.counts.items():
            out[o] += n
        return dict(out)

    def col_sums(self) -> dict[str, int]:
        out: Counter[str] = Counter()
        for (_, d), n in self.counts.items():
            out[d] += n
        return dict(out)

    def sankey(self) -> dict:
        """Nodes/links mapping; node ids carry the side's date."""
        a, b = self.date_a.isoformat(), self.date_b.isoformat()
        links = [
            {"source": f"{o}@{a}", "target": f"{d}@{b}", "value": n}
            for (o, d), n in sorted(self.counts.items())
        ]
        ids = sorted({l["source"] for l in links}) + sorted({l["target"] for l in links})
        return {
            "date_a": a, "date_b": b,
            "nodes": [{"id": i} for i in ids],
            "links": links,
        }


def flow_matrix(pm: PlacementMatrix, date_a: date, date_b: date, *, backfill: bool = True) -> FlowMatrix:
    """Origin area on ``date_a`` to destination area on ``date_b``, LOST included."""
    if not date_a < date_b:
        raise ValueError("date_a must precede date_b")
    state = pm.state(backfill)
    ia, ib = pm.day_index(date_a), pm.day_index(date_b)

    def label(code: int) -> str:
        if code == LOST_CODE:
            return LOST
        if code == UNSEEN_CODE:
            return UNOBSERVED
        return pm.areas[code]

    pairs = Counter(zip(state[:, ia].tolist(), state[:, ib].tolist()))
    return FlowMatrix(date_a, date_b, {(label(o), label(d)): n for (o, d), n in pairs.items()})


def antenna_counts(
    table: EventTable,
    registry: CellRegistry | None = None,
    bucket: int | timedelta = 3600,
    *,
    tz: str | int = DEFAULT_TZ,
    provinces: Iterable[str] | None = None,
) -> dict[tuple[str, int], int]:
    """Distinct devices per (cell, bucket start) with buckets aligned to local time.

    ``provinces`` restricts the output to cells of those provinces.
    """
    seconds = int(bucket.total_seconds()) if isinstance(bucket, timedelta) else int(bucket)
    if seconds < 60:
        raise ValueError("bucket must be at least one minute")
    if len(table) == 0:
        return {}
    offset = parse_offset(tz)
    sel = np.ones(len(table), dtype=bool)
    if provinces is not None:
        if registry is None:
            raise ValueError("filtering by province needs the registry")
        keep = set(provinces)
        cell_ok = np.array(
            [c in registry and registry[c].province in keep for c in table.cell_ids.tolist()], dtype=bool
        )
        sel = cell_ok[table.cell]
    b = (table.ts[sel] + offset) // seconds
    b0 = int(b.min()) if len(b) else 0
    b_rel = b - b0
    n_b = int(b_rel.max()) + 1 if len(b) else 1
    n_sub = len(table.sub_ids)
    key = (table.cell[sel].astype(np.int64) * n_b + b_rel) * n_sub + table.sub[sel]
    cb = np.unique(key) // n_sub
    cells_b, n = np.unique(cb, return_counts=True)
    cells = table.cell_ids.tolist()
    return {
        (cells[int(k // n_b)], int((k % n_b + b0) * seconds - offset)): int(c)
        for k, c in zip(cells_b.tolist(), n.tolist())
    }


def detect_drops(
    series: Mapping[date, int] | Sequence[tuple[date, int]],
    *,
    theta: float | None = None,
    top_n: int | None = None,
) -> list[tuple[date, float]]:
    """Days whose count fell relative to the previous day.

    Either every day with relative drop >= ``theta`` or the ``top_n`` largest
    drops; sorted by drop size, earlier date first on ties.
    """
    if (theta is None) == (top_n is None):
        raise ValueError("give exactly one of theta or top_n")
    items = sorted(series.items() if isinstance(series, Mapping) else series)
    if len(items) < 2:
        raise ValueError("need at least two dates")
    drops = []
    for (d0, c0), (d1, c1) in zip(items, items[1:]):
        rel = (c0 - c1) / max(c0, 1)
        if rel > 0:
            drops.append((d1, rel))
    drops.sort(key=lambda x: (-x[1], x[0]))
    if theta is not None:
        return [x for x in drops if x[1] >= theta]
    return drops[:top_n]


@dataclass(frozen=True)
class CrossingEstimate:
    """Assumption-driven bounds, not a point estimate."""

    group: str | None
    lost_at_border: int
    share: float
    churn_floor: float
    low: int
    high: int

    @property
    def interval(self) -> tuple[int, int]:
        return (self.low, self.high)


def _round_half_up(q: Fraction) -> int:
    return math.floor(q + Fraction(1, 2))


def estimate_crossings(
    lost_at_border: int, share: float, churn_floor: float, group: str | None = None
) -> CrossingEstimate:
    """Scale lost-at-border counts by operator share, with a churn discount for the low end.

    ``low = round(lost * churn_floor / share)``, ``high = round(lost / share)``.
    """
    if lost_at_border < 0:
        raise ValueError("lost_at_border must be non-negative")
    if not 0 < share <= 1 or not 0 < churn_floor <= 1:
        raise ValueError("share and churn_floor must lie in (0, 1]")
    s, c = Fraction(str(share)), Fraction(str(churn_floor))
    low = _round_half_up(lost_at_border * c / s)
    high = _round_half_up(Fraction(lost_at_border) / s)
    return CrossingEstimate(group, int(lost_at_border), share, churn_floor, low, high)


def lost_at_border(
    pm: PlacementMatrix,
    class_of: Mapping[str, MobilityClass],
    border_areas: Iterable[str],
    period: tuple[date, date] | None = None,
) -> dict[MobilityClass, int]:
    """Lost members whose last placement was a border area, per class.

    ``period`` limits the count to lost dates inside it (inclusive).
    """
    is_border = _area_mask(pm.areas, border_areas)
    out = {MobilityClass.VISA: 0, MobilityClass.NO_VISA: 0}
    if not pm.sub_ids:
        return out
    last_area = pm.observed[np.arange(len(pm.sub_ids)), pm.last]
    lost = pm.lost
    if period is not None:
        lost_day = pm.last + 1
        lo, hi = (period[0] - pm.start).days, (period[1] - pm.start).days
        lost = lost & (lost_day >= lo) & (lost_day <= hi)
    hit = lost & is_border[last_area]
    for s, h in zip(pm.sub_ids, hit.tolist()):
        if h and class_of.get(s) in out:
            out[class_of[s]] += 1
    return out
