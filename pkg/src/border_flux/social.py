"""Geotagged tweet analyses: geofence, language resolution, groups and destinations."""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import date
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from .ingest import Destination, LanguageGroup, Tweet, normalize_country
from .timeutil import DEFAULT_TZ, local_date, parse_offset

log = logging.getLogger(__name__)

UND = "und"

Ring = Sequence[tuple[float, float]]
Polygon = Sequence[Ring]  # outer ring first, then holes


# ----------------------------------------------------------------------------
# geometry


def point_in_ring(lon: float, lat: float, ring: Ring) -> bool:
    """Even-odd ray casting; points on an edge may fall either way."""
    inside = False
    n = len(ring)
    j = n - 1
    for i in range(n):
        xi, yi = ring[i]
        xj, yj = ring[j]
        if (yi > lat) != (yj > lat):
            x_cross = xi + (lat - yi) * (xj - xi) / (yj - yi)
            if lon < x_cross:
                inside = not inside
        j = i
    return inside


def point_in_polygon(lon: float, lat: float, polygon: Polygon) -> bool:
    if not polygon or not point_in_ring(lon, lat, polygon[0]):
        return False
    return not any(point_in_ring(lon, lat, hole) for hole in polygon[1:])


def _close(ring: Ring) -> tuple[tuple[float, float], ...]:
    pts = tuple((float(x), float(y)) for x, y in ring)
    if len(pts) < 3:
        raise ValueError("polygon ring needs at least three points")
    return pts if pts[0] == pts[-1] else pts + (pts[0],)


def _geojson_polygons(geometry: dict) -> list[Polygon]:
    kind = geometry.get("type")
    coords = geometry.get("coordinates")
    if kind == "Polygon":
        return [[_close(r) for r in coords]]
    if kind == "MultiPolygon":
        return [[_close(r) for r in poly] for poly in coords]
    raise ValueError(f"unsupported geometry type {kind!r}")


@dataclass(frozen=True)
class GeoFence:
    """Collection boxes plus a territory test.

    The territory is either a list of polygons or, when ``territory`` is
    ``None``, a country-code predicate on the tweet's ``country`` field.
    """

    bboxes: tuple[tuple[float, float, float, float], ...]
    territory: tuple[Polygon, ...] | None = None
    territory_country: str = "TUR"

    def __post_init__(self):
        for b in self.bboxes:
            if not (b[0] < b[2] and b[1] < b[3]):
                raise ValueError(f"degenerate bounding box {b}")
        if self.territory is not None:
            object.__setattr__(self, "territory", tuple([tuple(_close(r) for r in p) for p in self.territory]))

    def in_bbox(self, lon: float, lat: float) -> bool:
        return any(b[0] <= lon <= b[2] and b[1] <= lat <= b[3] for b in self.bboxes)

    def in_territory(self, tweet: Tweet) -> bool:
        if self.territory is None:
            return tweet.country == self.territory_country
        return any(point_in_polygon(tweet.lon, tweet.lat, p) for p in self.territory)

    def to_geojson(self) -> dict:
        feats = []
        for b in self.bboxes:
            ring = [[b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]], [b[0], b[1]]]
            feats.append({"type": "Feature", "properties": {"role": "bbox"},
                          "geometry": {"type": "Polygon", "coordinates": [ring]}})
        for p in self.territory or ():
            feats.append({"type": "Feature", "properties": {"role": "territory"},
                          "geometry": {"type": "Polygon", "coordinates": [[list(pt) for pt in r] for r in p]}})
        return {"type": "FeatureCollection", "properties": {"territory_country": self.territory_country},
                "features": feats}


def load_fence(source) -> GeoFence:
    """Read a fence from GeoJSON.

    Features with ``properties.role == "bbox"`` contribute their extent as a
    collection box; ``"territory"`` features form the territory polygons.
    Without territory features the country predicate is used.
    """
    doc = json.load(open(source, encoding="utf-8")) if not isinstance(source, dict) else source
    bboxes, territory = [], []
    for feat in doc.get("features", []):
        role = (feat.get("properties") or {}).get("role")
        polys = _geojson_polygons(feat["geometry"])
        if role == "bbox":
            for poly in polys:
                xs = [x for x, _ in poly[0]]
                ys = [y for _, y in poly[0]]
                bboxes.append((min(xs), min(ys), max(xs), max(ys)))
        elif role == "territory":
            territory.extend(polys)
        else:
            raise ValueError(f"fence feature with unknown role {role!r}")
    country = (doc.get("properties") or {}).get("territory_country", "TUR")
    return GeoFence(tuple(bboxes), tuple(territory) if territory else None, country)


# Approximate fixture around Edirne and Kırklareli; not the collection boxes of any real study.
DEFAULT_FENCE = GeoFence(
    bboxes=((25.9, 40.5, 28.2, 42.1),),
    territory=(((
        (26.63, 40.60), (26.55, 40.90), (26.35, 41.02), (26.33, 41.25), (26.63, 41.35),
        (26.60, 41.60), (26.35, 41.72), (26.55, 41.95), (27.05, 42.08), (27.55, 41.95),
        (28.05, 41.95), (28.20, 41.60), (28.20, 40.90), (27.50, 40.60), (26.63, 40.60),
    ),),),
)


@dataclass
class FilterResult:
    tweets: list[Tweet]
    dropped: Counter = field(default_factory=Counter)


def geofilter(tweets: Iterable[Tweet], fence: GeoFence = DEFAULT_FENCE) -> FilterResult:
    """Keep tweets inside at least one box and inside the territory."""
    kept: list[Tweet] = []
    dropped: Counter = Counter()
    for t in tweets:
        if not t.has_location:
            dropped["no_location"] += 1
        elif not t.has_coords:
            dropped["no_coordinates"] += 1
        elif not fence.in_bbox(t.lon, t.lat):
            dropped["outside_bbox"] += 1
        elif not fence.in_territory(t):
            dropped["outside_territory"] += 1
        else:
            kept.append(t)
    return FilterResult(kept, dropped)


# ----------------------------------------------------------------------------
# languages


@dataclass
class UserLanguageProfile:
    user_id: str
    counts: dict[str, int]
    resolved_und: str | None = None


@dataclass
class UndResolution:
    tweets: list[Tweet]
    profiles: dict[str, UserLanguageProfile]
    unresolved: int
    unresolved_users: set[str]

    def labelled(self) -> list[Tweet]:
        return [t for t in self.tweets if t.lang != UND]


def resolve_und(tweets: Iterable[Tweet]) -> UndResolution:
    """Give each ``und`` tweet its user's most used labelled language.

    Ties go to the tied language with the user's latest labelled tweet. Users
    with only ``und`` tweets stay unresolved.
    """
    tweets = list(tweets)
    counts: dict[str, Counter] = defaultdict(Counter)
    latest: dict[str, dict[str, tuple[int, int]]] = defaultdict(dict)
    for pos, t in enumerate(tweets):
        if t.lang == UND:
            counts[t.user_id]  # noqa: B018 - registers the user
            continue
        counts[t.user_id][t.lang] += 1
        prev = latest[t.user_id].get(t.lang)
        key = (t.ts, pos)
        if prev is None or key > prev:
            latest[t.user_id][t.lang] = key
    profiles = {}
    for user, c in counts.items():
        choice = None
        if c:
            choice = max(c, key=lambda lang: (c[lang], latest[user][lang]))
        profiles[user] = UserLanguageProfile(user, dict(c), choice)
    out, unresolved, unresolved_users = [], 0, set()
    for t in tweets:
        if t.lang == UND:
            lang = profiles[t.user_id].resolved_und
            if lang is None:
                unresolved += 1
                unresolved_users.add(t.user_id)
                out.append(t)
                continue
            t = replace(t, lang=lang)
        out.append(t)
    return UndResolution(out, profiles, unresolved, unresolved_users)


def map_language_group(lang: str, policy: Mapping[str, LanguageGroup]) -> LanguageGroup:
    return LanguageGroup(policy.get(lang, LanguageGroup.UNASSIGNED))


LANGUAGE_GROUPS = (LanguageGroup.VISA, LanguageGroup.NO_VISA, LanguageGroup.TURKISH)
DESTINATIONS = (Destination.EUROPE, Destination.TURKEY, Destination.OTHER)


@dataclass
class ActivityCounts:
    """Tweet and distinct-user counts keyed by group (or language), optionally per day."""

    tweets: dict
    users: dict
    excluded: Counter = field(default_factory=Counter)

    def rows(self) -> list[tuple]:
        return [(*((k,) if not isinstance(k, tuple) else k), self.tweets[k], self.users[k]) for k in sorted(self.tweets)]


def activity_counts(
    tweets: Iterable[Tweet],
    policy: Mapping[str, LanguageGroup] | None = None,
    *,
    granularity: str = "total",
    by: str = "group",
    tz: str | int = DEFAULT_TZ,
) -> ActivityCounts:
    """Tweets and distinct users per language group (``by="group"``) or language.

    ``granularity="daily"`` keys counts by ``(local date, key)``.
    """
    if granularity not in ("total", "daily"):
        raise ValueError(f"unknown granularity {granularity!r}")
    if by not in ("group", "lang"):
        raise ValueError(f"unknown grouping {by!r}")
    offset = parse_offset(tz)
    n_tweets: Counter = Counter()
    users: dict = defaultdict(set)
    excluded: Counter = Counter()
    for t in tweets:
        if t.lang == UND:
            excluded["unresolved"] += 1
            continue
        if by == "group":
            g = map_language_group(t.lang, policy or {})
            if g is LanguageGroup.UNASSIGNED:
                excluded["unassigned"] += 1
                continue
            key = g.value
        else:
            key = t.lang
        if granularity == "daily":
            key = (local_date(t.ts, offset), key)
        n_tweets[key] += 1
        users[key].add(t.user_id)
    if granularity == "total" and by == "group":
        for g in LANGUAGE_GROUPS:
            n_tweets.setdefault(g.value, 0)
            users.setdefault(g.value, set())
    return ActivityCounts(dict(n_tweets), {k: len(v) for k, v in users.items()}, excluded)


# ----------------------------------------------------------------------------
# destinations


@dataclass
class CountryPolygons:
    polygons: dict[str, list[Polygon]]

    def locate(self, lon: float, lat: float) -> str | None:
        for code in sorted(self.polygons):
            if any(point_in_polygon(lon, lat, p) for p in self.polygons[code]):
                return code
        return None


def load_country_polygons(source) -> CountryPolygons:
    """Country polygons from GeoJSON features with an ``iso_a3`` (or ``country``) property."""
    doc = json.load(open(source, encoding="utf-8")) if not isinstance(source, dict) else source
    out: dict[str, list[Polygon]] = defaultdict(list)
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        code = props.get("iso_a3") or props.get("country")
        if not code:
            raise ValueError("country feature without iso_a3/country property")
        out[normalize_country(code)].extend(_geojson_polygons(feat["geometry"]))
    return CountryPolygons(dict(out))


def classify_destination(
    tweet: Tweet, policy: Mapping[str, Destination], countries: CountryPolygons | None = None
) -> Destination | None:
    """Destination class of the tweet's country; ``None`` when the location is unresolvable.

    Countries missing from the policy fall into ``Other``.
    """
    code = tweet.country
    if code is None and tweet.has_coords and countries is not None:
        code = countries.locate(tweet.lon, tweet.lat)
    if code is None:
        return None
    return Destination(policy.get(code, Destination.OTHER))


@dataclass
class DestinationMatrix:
    counts: dict[tuple[LanguageGroup, Destination], int]
    present: int
    disappeared: int
    user_groups: dict[str, set[str]]
    user_destinations: dict[str, set[str]]
    excluded: Counter = field(default_factory=Counter)

    def rows(self) -> list[tuple[str, str, int]]:
        return [(g.value, d.value, self.counts.get((g, d), 0)) for g in LANGUAGE_GROUPS for d in DESTINATIONS]


def destination_matrix(
    tweets: Iterable[Tweet],
    border_users: Iterable[str],
    period: tuple[date, date] = (date(2020, 5, 1), date(2020, 12, 31)),
    lang_policy: Mapping[str, LanguageGroup] | None = None,
    dest_policy: Mapping[str, Destination] | None = None,
    *,
    countries: CountryPolygons | None = None,
    tz: str | int = DEFAULT_TZ,
) -> DestinationMatrix:
    """Distinct border users per (language group, destination) in the follow-up period.

    A user adds one to a cell when at least one of their tweets has that
    language group and that destination. ``und`` labels are resolved inside
    the follow-up tweets first.
    """
    offset = parse_offset(tz)
    border = set(border_users)
    followup = [
        t for t in tweets
        if t.user_id in border and t.has_location and period[0] <= local_date(t.ts, offset) <= period[1]
    ]
    present = {t.user_id for t in followup}
    res = resolve_und(followup)
    excluded: Counter = Counter()
    excluded["unresolved_und"] = res.unresolved
    cells: dict[tuple[LanguageGroup, Destination], set[str]] = defaultdict(set)
    user_groups: dict[str, set[str]] = defaultdict(set)
    user_dests: dict[str, set[str]] = defaultdict(set)
    for t in res.tweets:
        dest = classify_destination(t, dest_policy or {}, countries)
        if dest is None:
            excluded["unresolvable_location"] += 1
        else:
            user_dests[t.user_id].add(dest.value)
        if t.lang == UND:
            continue
        group = map_language_group(t.lang, lang_policy or {})
        if group is LanguageGroup.UNASSIGNED:
            excluded["unassigned_language"] += 1
            continue
        user_groups[t.user_id].add(group.value)
        if dest is not None:
            cells[(group, dest)].add(t.user_id)
    return DestinationMatrix(
        {k: len(v) for k, v in cells.items()},
        len(present),
        len(border) - len(present),
        dict(user_groups),
        dict(user_dests),
        excluded,
    )


def overlap_regions(user_sets: Mapping[str, Iterable[str]], categories: Sequence[str]) -> list[tuple[tuple[str, ...], int]]:
    """Disjoint Venn-region sizes for every non-empty subset of ``categories``.

    A user falls in exactly the region equal to their category set; users
    with no category are not counted.
    """
    index = {c: i for i, c in enumerate(categories)}
    tally: Counter = Counter()
    for cats in user_sets.values():
        s = frozenset(cats)
        if not s:
            continue
        unknown = s - index.keys()
        if unknown:
            raise ValueError(f"unknown categories {sorted(unknown)}")
        tally[tuple(sorted(s, key=index.__getitem__))] += 1
    out = []
    for r in range(1, len(categories) + 1):
        for combo in combinations(categories, r):
            out.append((tuple(combo), tally.get(tuple(combo), 0)))
    return out
