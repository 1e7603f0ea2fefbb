"""Synthetic worlds with a ground-truth manifest.

A world is a set of provinces with cells, subscribers of several
nationalities with daily itineraries, xDR events drawn from those
itineraries, and geotagged tweets. Injected events (surge, disappear, return)
move or silence an exact number of subscribers on a given date. On noise-free
configurations the manifest determines the pipeline's outputs exactly.

All randomness comes from one ``numpy.random.Generator(PCG64(seed))`` stream
consumed in a fixed order, so the same config gives byte-identical files.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any

import numpy as np

from .social import DEFAULT_FENCE
from .timeutil import DAY, DEFAULT_TZ, date_number, parse_offset, to_date

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.Generator(PCG64)"


class SynthError(ValueError):
    pass


@dataclass
class Injection:
    kind: str  # surge | disappear | return
    date: date
    count: int
    group: str | None = None  # Visa | NoVisa | None for everyone
    target: str | None = None  # surge destination province
    from_provinces: list[str] | None = None

    def __post_init__(self):
        self.date = to_date(self.date)
        if self.kind not in ("surge", "disappear", "return"):
            raise SynthError(f"unknown injection kind {self.kind!r}")
        if self.count < 0:
            raise SynthError("injection count must be non-negative")
        if self.kind == "surge" and not self.target:
            raise SynthError("surge injection needs a target province")


@dataclass
class TweetConfig:
    users: int = 0
    languages: dict[str, float] = field(default_factory=lambda: {"tr": 0.6, "en": 0.2, "ar": 0.1, "fa": 0.05, "el": 0.05})
    single_language_fraction: float = 0.5
    und_fraction: float = 0.1
    tweets_per_user: float = 6.0
    border_period: tuple[date, date] = (date(2020, 2, 25), date(2020, 3, 25))
    followup_period: tuple[date, date] = (date(2020, 5, 1), date(2020, 12, 31))
    greek_side_fraction: float = 0.05
    outside_fraction: float = 0.05
    present_fraction: float = 0.65
    destinations: dict[str, float] = field(default_factory=lambda: {"Turkey": 0.75, "Europe": 0.18, "Other": 0.07})
    multi_destination_fraction: float = 0.2
    followup_tweets_per_user: float = 4.0

    def __post_init__(self):
        self.border_period = (to_date(self.border_period[0]), to_date(self.border_period[1]))
        self.followup_period = (to_date(self.followup_period[0]), to_date(self.followup_period[1]))
        for name in ("single_language_fraction", "und_fraction", "greek_side_fraction", "outside_fraction",
                     "present_fraction", "multi_destination_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise SynthError(f"{name} must lie in [0, 1]")
        if self.users < 0:
            raise SynthError("tweet users must be non-negative")


DEFAULT_PROVINCES = {"Edirne": 4, "Kırklareli": 3, "Istanbul": 8, "Ankara": 4, "Izmir": 3, "Tekirdağ": 2}
DEFAULT_NATIONALITIES = {"SYR": 400, "AFG": 200, "IRQ": 150, "IRN": 50, "GRC": 80, "BGR": 60, "MDA": 40, "DEU": 20}
DEFAULT_VISA = {
    "SYR": "Visa", "AFG": "Visa", "IRQ": "Visa", "IRN": "Visa", "PAK": "Visa", "MAR": "Visa",
    "GRC": "NoVisa", "BGR": "NoVisa", "MDA": "NoVisa", "DEU": "NoVisa", "GBR": "NoVisa", "USA": "NoVisa",
}
DEFAULT_LANGUAGE_GROUPS = {
    "tr": "Turkish", "ar": "Visa", "fa": "Visa", "ur": "Visa", "ps": "Visa", "ku": "Visa",
    "en": "NoVisa", "el": "NoVisa", "bg": "NoVisa", "de": "NoVisa", "fr": "NoVisa", "ro": "NoVisa",
}
DEST_COUNTRIES = {
    "Turkey": ["TUR"],
    "Europe": ["BGR", "DEU", "GBR", "GRC", "NLD", "SRB"],
    "Other": ["CAN", "IRQ", "SYR", "USA"],
}
FILLER = {
    "tr": ["sınır", "edirne", "bugün", "insanlar", "haber", "kapı", "yol"],
    "en": ["border", "people", "today", "news", "gate", "road", "crossing"],
    "ar": ["الحدود", "الناس", "اليوم", "أخبار"],
    "fa": ["مرز", "مردم", "امروز"],
    "el": ["σύνορα", "άνθρωποι", "σήμερα"],
}
SENTIMENT_WORDS = {
    "tr": ["güzel", "umut", "kötü", "korkunç", "çok", "değil"],
    "en": ["love", "hope", "hate", "terrible", "very", "not"],
}


@dataclass
class SynthConfig:
    seed: int = 0
    start: date = date(2020, 2, 25)
    end: date = date(2020, 6, 15)
    tz: str = DEFAULT_TZ
    provinces: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_PROVINCES))
    border_provinces: list[str] = field(default_factory=lambda: ["Edirne", "Kırklareli"])
    nationalities: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_NATIONALITIES))
    visa_policy: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_VISA))
    language_groups: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_LANGUAGE_GROUPS))
    events_per_day: float = 4.0
    active_prob: float = 0.85
    move_prob: float = 0.02
    border_start_fraction: float = 0.7
    late_start_days: int = 0
    noise: float = 0.0
    injections: list[Injection] = field(default_factory=list)
    tweets: TweetConfig = field(default_factory=TweetConfig)
    itineraries_in_manifest: bool = True

    def __post_init__(self):
        self.start, self.end = to_date(self.start), to_date(self.end)
        self.injections = [i if isinstance(i, Injection) else Injection(**i) for i in self.injections]
        if isinstance(self.tweets, dict):
            self.tweets = TweetConfig(**self.tweets)
        if self.end < self.start:
            raise SynthError("horizon end precedes start")
        if not 0 < self.seed.bit_length() <= 64 and self.seed != 0:
            raise SynthError("seed must fit in 64 bits")
        if self.seed < 0:
            raise SynthError("seed must be non-negative")
        if any(n < 0 for n in self.nationalities.values()):
            raise SynthError("subscriber counts must be non-negative")
        if any(n < 1 for n in self.provinces.values()):
            raise SynthError("every province needs at least one cell")
        missing = set(self.border_provinces) - set(self.provinces)
        if missing:
            raise SynthError(f"border provinces without cells: {sorted(missing)}")
        if not 0 < self.active_prob <= 1:
            raise SynthError("active_prob must lie in (0, 1]")
        if self.events_per_day < 1:
            raise SynthError("events_per_day must be >= 1")
        for inj in self.injections:
            if not self.start < inj.date <= self.end:
                raise SynthError(f"injection date {inj.date} outside horizon (after its first day)")
            if inj.kind == "surge" and inj.target not in self.provinces:
                raise SynthError(f"surge target {inj.target!r} is not a province")

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1

    @classmethod
    def from_toml(cls, path) -> "SynthConfig":
        import tomli

        with open(path, "rb") as fh:
            raw = tomli.load(fh)
        return cls.from_dict(raw.get("synth", raw))

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        raw["injections"] = [Injection(**i) for i in raw.get("injections", [])]
        if "tweets" in raw:
            t = dict(raw["tweets"])
            for key in ("border_period", "followup_period"):
                if key in t:
                    t[key] = tuple(t[key])
            raw["tweets"] = TweetConfig(**t)
        return cls(**raw)


@dataclass
class World:
    """In-memory result of :func:`generate_world`."""

    config: SynthConfig
    subscriber_ids: list[str]
    nationality: list[str]
    cells: list[tuple[str, str, str, float, float]]
    sub: np.ndarray
    ts: np.ndarray
    cell: np.ndarray
    manifest: dict


def _classes(cfg: SynthConfig, nats: list[str]) -> np.ndarray:
    return np.array([cfg.visa_policy.get(n, "Unknown") for n in nats], dtype=object)


def _make_cells(cfg: SynthConfig, rng: np.random.Generator):
    names = sorted(cfg.provinces)
    cells, first_cell, n_cells = [], [], []
    for p_i, name in enumerate(names):
        first_cell.append(len(cells))
        n_cells.append(cfg.provinces[name])
        base_lat = 37.0 + 5.0 * rng.random()
        base_lon = 26.0 + 18.0 * rng.random()
        for c in range(cfg.provinces[name]):
            lat = round(base_lat + 0.2 * rng.random(), 5)
            lon = round(base_lon + 0.2 * rng.random(), 5)
            cells.append((f"c{p_i:02d}{c:03d}", name, f"{name}-{c % 3}", lat, lon))
    return names, cells, np.array(first_cell, np.int64), np.array(n_cells, np.int64)


def generate_world(cfg: SynthConfig) -> World:
    """Itineraries, cells and xDR events under ``cfg`` plus their manifest."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    names, cells, first_cell, n_cells = _make_cells(cfg, rng)
    n_prov = len(names)
    prov_index = {p: i for i, p in enumerate(names)}
    border = np.array([p in set(cfg.border_provinces) for p in names], dtype=bool)
    border_idx = np.flatnonzero(border)
    other_idx = np.flatnonzero(~border)

    nats: list[str] = []
    for code in sorted(cfg.nationalities):
        nats.extend([code] * cfg.nationalities[code])
    n = len(nats)
    D = cfg.n_days
    width = max(7, len(str(max(n - 1, 0))))
    sub_ids = [f"s{i:0{width}d}" for i in range(n)]
    cls = _classes(cfg, nats)

    first_day = rng.integers(0, cfg.late_start_days + 1, size=n) if cfg.late_start_days else np.zeros(n, np.int64)
    at_border = rng.random(n) < cfg.border_start_fraction
    if n and len(border_idx) and len(other_idx):
        start_prov = np.where(
            at_border, border_idx[rng.integers(0, len(border_idx), n)], other_idx[rng.integers(0, len(other_idx), n)]
        )
    else:
        start_prov = rng.integers(0, n_prov, n)
    home = start_prov.copy()
    active = rng.random((n, D)) < cfg.active_prob
    days = np.arange(D)
    active[days[None, :] < first_day[:, None]] = False
    active[np.arange(n), first_day] = True

    P = np.zeros((n, D), dtype=np.int64)
    silenced = np.full(n, D, dtype=np.int64)
    by_day: dict[int, list[Injection]] = {}
    for inj in cfg.injections:
        by_day.setdefault((inj.date - cfg.start).days, []).append(inj)
    realized = []
    move_draw = rng.random((n, D))
    move_to = rng.integers(1, max(n_prov, 2), size=(n, D))

    for d in range(D):
        if d == 0:
            P[:, 0] = start_prov
        else:
            P[:, d] = P[:, d - 1]
        began = first_day == d
        P[began, d] = start_prov[began]
        if n_prov > 1:
            mv = active[:, d] & (move_draw[:, d] < cfg.move_prob) & (first_day < d)
            P[mv, d] = (P[mv, d] + move_to[mv, d]) % n_prov
        for inj in by_day.get(d, []):
            ok = (silenced > d) & (first_day < d)
            if inj.group is not None:
                ok &= cls == inj.group
            if inj.from_provinces:
                allowed = np.array([p in set(inj.from_provinces) for p in names])
                ok &= allowed[P[:, d - 1]]
            if inj.kind == "return":
                ok &= P[:, d] != home
            eligible = np.flatnonzero(ok)
            if inj.count > len(eligible):
                raise SynthError(
                    f"{inj.kind} on {inj.date} needs {inj.count} subscribers but only {len(eligible)} are eligible"
                )
            chosen = np.sort(rng.choice(eligible, size=inj.count, replace=False)) if inj.count else np.zeros(0, np.int64)
            if inj.kind == "surge":
                P[chosen, d] = prov_index[inj.target]
                active[chosen, d] = True
            elif inj.kind == "return":
                P[chosen, d] = home[chosen]
                active[chosen, d] = True
            else:
                active[chosen, d - 1] = True
                silenced[chosen] = d
            realized.append({
                "kind": inj.kind, "date": inj.date.isoformat(), "group": inj.group, "target": inj.target,
                "count": int(inj.count), "members": [sub_ids[i] for i in chosen.tolist()],
            })
    active[days[None, :] >= silenced[:, None]] = False
    not_silenced = silenced >= D
    active[not_silenced, D - 1] = True

    counts = np.where(active, 1 + rng.poisson(cfg.events_per_day - 1, size=(n, D)), 0)
    flat = np.repeat(np.arange(n * D, dtype=np.int64), counts.ravel())
    ev_sub = flat // D
    ev_day = flat % D
    ev_prov = P.ravel()[flat]
    if cfg.noise > 0 and n_prov > 1:
        noisy = rng.random(len(flat)) < cfg.noise
        ev_prov = np.where(noisy, (ev_prov + rng.integers(1, n_prov, len(flat))) % n_prov, ev_prov)
    ev_cell = first_cell[ev_prov] + (rng.random(len(flat)) * n_cells[ev_prov]).astype(np.int64)
    secs = rng.integers(0, DAY, len(flat))
    offset = parse_offset(cfg.tz)
    ts = (date_number(cfg.start) + ev_day) * DAY + secs - offset
    order = np.lexsort((ev_cell, ts, ev_sub))
    ev_sub, ts, ev_cell = ev_sub[order], ts[order], ev_cell[order]

    last = np.where(active.any(axis=1), D - 1 - active[:, ::-1].argmax(axis=1), -1)
    manifest_subs = {}
    for i in range(n):
        f, l = int(first_day[i]), int(last[i])
        lost = l < D - 1
        entry: dict[str, Any] = {
            "nationality": nats[i],
            "class": cls[i],
            "first_obs": (cfg.start + timedelta(days=f)).isoformat(),
            "last_obs": (cfg.start + timedelta(days=l)).isoformat(),
            "lost_date": (cfg.start + timedelta(days=l + 1)).isoformat() if lost else None,
        }
        if cfg.itineraries_in_manifest:
            segs = []
            prev = None
            for d in range(f, l + 1):
                p = int(P[i, d])
                if p != prev:
                    segs.append([(cfg.start + timedelta(days=d)).isoformat(), names[p]])
                    prev = p
            entry["itinerary"] = segs
        manifest_subs[sub_ids[i]] = entry

    manifest = {
        "rng": {"algorithm": RNG_ALGORITHM, "seed": cfg.seed, "numpy": np.__version__},
        "horizon": [cfg.start.isoformat(), cfg.end.isoformat()],
        "tz": cfg.tz,
        "noise_free": cfg.noise == 0,
        "n_subscribers": n,
        "n_events": int(len(ts)),
        "injections": realized,
        "subscribers": manifest_subs,
    }
    return World(cfg, sub_ids, nats, cells, ev_sub.astype(np.int32), ts, ev_cell.astype(np.int32), manifest)


def expand_itinerary(entry: dict) -> dict[date, str]:
    """Day-by-day provinces from a manifest itinerary (run-length encoded)."""
    segs = entry["itinerary"]
    last = date.fromisoformat(entry["last_obs"])
    out = {}
    for j, (start, prov) in enumerate(segs):
        d = date.fromisoformat(start)
        stop = date.fromisoformat(segs[j + 1][0]) - timedelta(days=1) if j + 1 < len(segs) else last
        while d <= stop:
            out[d] = prov
            d += timedelta(days=1)
    return out


# ----------------------------------------------------------------------------
# tweets


def _pick(rng: np.random.Generator, weights: dict[str, float], size=None):
    keys = sorted(weights)
    p = np.array([weights[k] for k in keys], dtype=float)
    p = p / p.sum()
    idx = rng.choice(len(keys), size=size, p=p)
    return [keys[i] for i in np.atleast_1d(idx)] if size is not None else keys[int(idx)]


def _ts_in(rng: np.random.Generator, period: tuple[date, date], offset: int) -> int:
    d0 = date_number(period[0])
    span = (period[1] - period[0]).days + 1
    return int((d0 + rng.integers(0, span)) * DAY + rng.integers(0, DAY) - offset)


def _text(rng: np.random.Generator, lang: str) -> str:
    words = FILLER.get(lang, ["xx"])
    senti = SENTIMENT_WORDS.get(lang, [])
    n = int(rng.integers(3, 9))
    pool = words + senti
    return " ".join(pool[int(rng.integers(0, len(pool)))] for _ in range(n))


def _und_quota(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    k = int(math.floor(fraction * n + 0.5))
    mask = np.zeros(n, dtype=bool)
    if k:
        mask[rng.choice(n, size=k, replace=False)] = True
    return mask


def _regions(user_sets: dict[str, set[str]], categories: list[str]) -> list[list]:
    from itertools import combinations

    tally: dict[tuple, int] = {}
    for s in user_sets.values():
        if s:
            key = tuple(c for c in categories if c in s)
            tally[key] = tally.get(key, 0) + 1
    out = []
    for r in range(1, len(categories) + 1):
        for combo in combinations(categories, r):
            out.append([list(combo), tally.get(combo, 0)])
    return out


def generate_tweets(cfg: SynthConfig) -> tuple[list[dict], dict]:
    """Tweet records (NDJSON-ready dicts) and their ground-truth manifest."""
    tc = cfg.tweets
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
    offset = parse_offset(cfg.tz)
    groups = cfg.language_groups
    fence = DEFAULT_FENCE
    users = [f"u{i:05d}" for i in range(tc.users)]
    langs_of: dict[str, list[str]] = {}
    for u in users:
        primary = _pick(rng, tc.languages)
        langs = [primary]
        if rng.random() >= tc.single_language_fraction and len(tc.languages) > 1:
            extra = int(rng.integers(1, 3))
            others = sorted(set(tc.languages) - {primary})
            for j in rng.permutation(len(others))[:extra].tolist():
                langs.append(others[j])
        langs_of[u] = langs

    border_records: list[dict] = []
    for u in users:
        n = max(len(langs_of[u]), 1 + int(rng.poisson(max(tc.tweets_per_user - 1, 0))))
        for j in range(n):
            lang = langs_of[u][j] if j < len(langs_of[u]) else langs_of[u][int(rng.integers(0, len(langs_of[u])))]
            r = rng.random()
            if r < tc.greek_side_fraction:
                lon, lat, country = 25.95 + 0.3 * rng.random(), 40.9 + 0.6 * rng.random(), "GRC"
            elif r < tc.greek_side_fraction + tc.outside_fraction:
                lon, lat, country = 29.0 + rng.random(), 40.8 + 0.4 * rng.random(), "TUR"
            else:
                lon, lat, country = 26.9 + rng.random(), 41.0 + 0.85 * rng.random(), "TUR"
            border_records.append({
                "user": u, "ts": _ts_in(rng, tc.border_period, offset), "lat": round(float(lat), 5),
                "lon": round(float(lon), 5), "country": country, "lang": lang, "text": _text(rng, lang),
            })
    und = _und_quota(rng, len(border_records), tc.und_fraction)
    for rec, is_und in zip(border_records, und.tolist()):
        rec["true_lang"] = rec["lang"]
        if is_und:
            rec["lang"] = "und"

    n_present = int(math.floor(tc.present_fraction * len(users) + 0.5))
    present = sorted(rng.choice(len(users), size=n_present, replace=False).tolist()) if n_present else []
    present_users = [users[i] for i in present]
    dests_of: dict[str, list[str]] = {}
    follow_records: list[dict] = []
    for u in present_users:
        dests = [_pick(rng, tc.destinations)]
        if rng.random() < tc.multi_destination_fraction:
            others = sorted(set(tc.destinations) - set(dests))
            if others:
                dests.append(others[int(rng.integers(0, len(others)))])
        dests_of[u] = dests
        n = max(len(langs_of[u]), len(dests), 1 + int(rng.poisson(max(tc.followup_tweets_per_user - 1, 0))))
        for j in range(n):
            lang = langs_of[u][j] if j < len(langs_of[u]) else langs_of[u][int(rng.integers(0, len(langs_of[u])))]
            dest = dests[j] if j < len(dests) else dests[int(rng.integers(0, len(dests)))]
            countries = DEST_COUNTRIES[dest]
            follow_records.append({
                "user": u, "ts": _ts_in(rng, tc.followup_period, offset),
                "country": countries[int(rng.integers(0, len(countries)))], "lang": lang,
                "true_dest": dest, "text": _text(rng, lang),
            })
    und_f = _und_quota(rng, len(follow_records), tc.und_fraction)
    for rec, is_und in zip(follow_records, und_f.tolist()):
        rec["true_lang"] = rec["lang"]
        if is_und:
            rec["lang"] = "und"

    records = sorted(border_records + follow_records, key=lambda r: (r["user"], r["ts"], r["lang"], r.get("country", "")))
    for i, rec in enumerate(records):
        rec["id"] = f"t{i:07d}"

    def period_stats(recs: list[dict], inside_only: bool) -> dict:
        if inside_only:
            recs = [r for r in recs if fence.in_bbox(r["lon"], r["lat"]) and r["country"] == "TUR"]
        per_user: dict[str, list[dict]] = {}
        for r in recs:
            per_user.setdefault(r["user"], []).append(r)
        all_und = sorted(u for u, rs in per_user.items() if all(r["lang"] == "und" for r in rs))
        observable = {
            u: {groups[r["lang"]] for r in rs if r["lang"] != "und" and r["lang"] in groups}
            for u, rs in per_user.items()
        }
        return {
            "tweets": len(recs),
            "und_tweets": sum(r["lang"] == "und" for r in recs),
            "all_und_users": all_und,
            "all_und_user_tweets": sum(len(per_user[u]) for u in all_und),
            "users": len(per_user),
            "observable_groups": {u: sorted(g) for u, g in sorted(observable.items())},
        }

    border_stats = period_stats(border_records, inside_only=True)
    follow_stats = period_stats(follow_records, inside_only=False)
    lang_sets = {u: set(g) for u, g in follow_stats["observable_groups"].items()}
    dest_sets = {u: set(dests_of[u]) for u in present_users}
    manifest = {
        "rng": {"algorithm": RNG_ALGORITHM, "seed": [cfg.seed, 1], "numpy": np.__version__},
        "users": len(users),
        "languages": {u: langs_of[u] for u in users},
        "destinations": {u: dests_of[u] for u in present_users},
        "present_users": present_users,
        "border_period": border_stats,
        "followup_period": follow_stats,
        "venn": {
            "language": _regions(lang_sets, ["Visa", "NoVisa", "Turkish"]),
            "destination": _regions(dest_sets, ["Europe", "Turkey", "Other"]),
        },
    }
    out = []
    for r in records:
        rec = {"id": r["id"], "user": r["user"], "ts": r["ts"]}
        if "lat" in r:
            rec["lat"], rec["lon"] = r["lat"], r["lon"]
        rec["country"] = r["country"]
        rec["lang"] = r["lang"]
        rec["text"] = r["text"]
        out.append(rec)
    return out, manifest


# ----------------------------------------------------------------------------
# writing


FIXTURE_LEXICONS = {
    "en": [
        ("love", "term", 3), ("hope", "term", 2), ("hate", "term", -4), ("terrible", "term", -5),
        ("wonderful", "term", 5), ("very", "booster", 1), ("slightly", "booster", -1), ("not", "negator", ""),
    ],
    "tr": [
        ("güzel", "term", 3), ("umut", "term", 2), ("kötü", "term", -3), ("korkunç", "term", -5),
        ("çok", "booster", 1), ("değil", "negator", ""),
    ],
}


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


def write_events_csv(path: Path, world: World) -> None:
    import pyarrow as pa
    import pyarrow.csv as pacsv

    sub_dict = pa.array(world.subscriber_ids, pa.string())
    cell_dict = pa.array([c[0] for c in world.cells], pa.string())
    n = len(world.ts)
    table = pa.table({
        "subscriber_id": pa.DictionaryArray.from_arrays(pa.array(world.sub, pa.int32()), sub_dict).cast(pa.string()),
        "ts": pa.array(world.ts, pa.int64()),
        "cell_id": pa.DictionaryArray.from_arrays(pa.array(world.cell, pa.int32()), cell_dict).cast(pa.string()),
        "kind": pa.DictionaryArray.from_arrays(pa.array(np.zeros(n, np.int32)), pa.array(["data"])).cast(pa.string()),
    })
    with open(path, "wb") as fh:
        fh.write(b"subscriber_id,ts,cell_id,kind\n")
        opts = pacsv.WriteOptions(include_header=False, quoting_style="none", batch_size=1 << 16)
        pacsv.write_csv(table, fh, write_options=opts)


def write_world(cfg: SynthConfig, out_dir, *, tweets: bool = True) -> dict:
    """Generate and write a complete world; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg)
    _write_csv(out / "cells.csv", ["cell_id", "province", "district", "lat", "lon"], world.cells)
    _write_csv(out / "subscribers.csv", ["subscriber_id", "nationality"], zip(world.subscriber_ids, world.nationality))
    _write_csv(out / "visa_policy.csv", ["nationality", "class"], sorted(cfg.visa_policy.items()))
    _write_csv(out / "lang_policy.csv", ["lang", "group"], sorted(cfg.language_groups.items()))
    dest_rows = sorted((c, d) for d, cs in DEST_COUNTRIES.items() for c in cs)
    _write_csv(out / "dest_policy.csv", ["country", "dest"], dest_rows)
    write_events_csv(out / "events.csv", world)
    (out / "fence.geojson").write_text(json.dumps(DEFAULT_FENCE.to_geojson(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    lex_dir = out / "lexicons"
    lex_dir.mkdir(exist_ok=True)
    for lang, rows in FIXTURE_LEXICONS.items():
        _write_csv(lex_dir / f"{lang}.csv", ["token", "kind", "value"], rows)
    manifest = dict(world.manifest)
    if tweets and cfg.tweets.users:
        records, tmanifest = generate_tweets(cfg)
        with open(out / "tweets.ndjson", "w", encoding="utf-8", newline="") as fh:
            for r in records:
                fh.write(json.dumps(r, ensure_ascii=False) + "\n")
        manifest["tweets"] = tmanifest
    manifest["config"] = _config_dict(cfg)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return manifest


def _config_dict(cfg: SynthConfig) -> dict:
    def conv(v):
        if isinstance(v, date):
            return v.isoformat()
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(asdict(cfg))
