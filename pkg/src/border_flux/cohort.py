"""Selection of the foreign-subscriber population seen at the border."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping

import numpy as np

from .ingest import CellRegistry, EventTable, MobilityClass, Subscriber, XdrEvent
from .timeutil import DEFAULT_TZ, day_end, day_start, parse_offset

log = logging.getLogger(__name__)

HOME_NATIONALITY = "TUR"


@dataclass(frozen=True)
class CohortSpec:
    border_provinces: frozenset[str] = frozenset({"Edirne", "Kırklareli"})
    start: date = date(2020, 2, 25)
    end: date = date(2020, 3, 25)
    top_k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "border_provinces", frozenset(self.border_provinces))
        if not self.border_provinces:
            raise ValueError("border_provinces must not be empty")
        if self.start > self.end:
            raise ValueError(f"cohort window start {self.start} after end {self.end}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class Cohort:
    members: set[str]
    class_of: dict[str, MobilityClass]
    nationalities: frozenset[str]
    nationality_of: dict[str, str] = field(default_factory=dict)
    excluded: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.members)

    def rows(self) -> list[tuple[str, str, str]]:
        """Audit rows ``(subscriber_id, class, nationality)`` sorted by id."""
        return [(s, self.class_of[s].value, self.nationality_of.get(s, "")) for s in sorted(self.members)]


def select_border_cohort(
    events: EventTable | Iterable[XdrEvent],
    registry: CellRegistry,
    spec: CohortSpec,
    subscribers: Mapping[str, Subscriber] | None = None,
    *,
    tz: str | int = DEFAULT_TZ,
) -> set[str]:
    """Subscribers with at least one event at a border-province cell inside the window.

    Presence is tested on raw events, not on daily placements. When
    ``subscribers`` is given, ids missing from it are left out.
    """
    offset = parse_offset(tz)
    lo, hi = day_start(spec.start, offset), day_end(spec.end, offset)
    border = spec.border_provinces
    if isinstance(events, EventTable):
        cell_border = np.array(
            [c in registry and registry[c].province in border for c in events.cell_ids.tolist()], dtype=bool
        )
        if len(events) == 0 or not cell_border.any():
            found: set[str] = set()
        else:
            hit = cell_border[events.cell] & (events.ts >= lo) & (events.ts <= hi)
            found = set(events.sub_ids[np.unique(events.sub[hit])].tolist())
    else:
        found = {
            e.subscriber_id for e in events
            if lo <= e.ts <= hi and e.cell_id in registry and registry[e.cell_id].province in border
        }
    if subscribers is not None:
        found = {s for s in found if s in subscribers}
    if not found:
        log.warning("no subscriber seen at %s between %s and %s", sorted(border), spec.start, spec.end)
    return found


def top_k_nationalities(candidates: Iterable[str], subscribers: Mapping[str, Subscriber], k: int) -> frozenset[str]:
    """The ``k`` nationalities with most candidates; ties go to the lower code."""
    counts = Counter(subscribers[s].nationality for s in candidates if s in subscribers)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return frozenset(nat for nat, _ in ranked[:k])


def assign_visa_class(nationality: str, policy: Mapping[str, MobilityClass]) -> MobilityClass:
    cls = policy.get(nationality.strip().upper())
    if cls is None:
        log.warning("nationality %s missing from visa policy", nationality)
        return MobilityClass.UNKNOWN
    return MobilityClass(cls)


def build_cohort(
    events: EventTable | Iterable[XdrEvent],
    registry: CellRegistry,
    subscribers: Mapping[str, Subscriber],
    policy: Mapping[str, MobilityClass],
    spec: CohortSpec = CohortSpec(),
    *,
    tz: str | int = DEFAULT_TZ,
) -> Cohort:
    """Border presence, foreign nationals only, top-k nationalities, known visa class."""
    present = select_border_cohort(events, registry, spec, subscribers, tz=tz)
    excluded: Counter = Counter()
    foreign = set()
    for s in present:
        if subscribers[s].nationality == HOME_NATIONALITY:
            excluded["home_nationality"] += 1
        else:
            foreign.add(s)
    nats = top_k_nationalities(foreign, subscribers, spec.top_k)
    members: set[str] = set()
    class_of: dict[str, MobilityClass] = {}
    nationality_of: dict[str, str] = {}
    unknown_nats: set[str] = set()
    for s in foreign:
        nat = subscribers[s].nationality
        if nat not in nats:
            excluded["outside_top_k"] += 1
            continue
        cls = policy.get(nat)
        if cls is None:
            unknown_nats.add(nat)
            excluded["unknown_visa_class"] += 1
            continue
        members.add(s)
        class_of[s] = MobilityClass(cls)
        nationality_of[s] = nat
    if unknown_nats:
        log.warning("excluded subscribers of nationalities without visa class: %s", sorted(unknown_nats))
    return Cohort(members, class_of, nats, nationality_of, excluded)
