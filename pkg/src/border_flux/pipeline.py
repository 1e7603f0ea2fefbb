"""Run configuration and the stage orchestrator.

Stages read their inputs from the run directory and write either published
files (top level, privacy-gated) or intermediates under ``internal/``. A stage
whose upstream artifact is missing and not scheduled in the same run fails
with ``MISSING_STAGE:<name>``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable

from . import outputs
from .cohort import CohortSpec, build_cohort
from .ingest import (
    DEFAULT_HASHTAGS,
    DEFAULT_MAX_ERROR_RATE,
    EventTable,
    IngestError,
    MobilityClass,
    Subscriber,
    drop_unknown_subscribers,
    format_tweets,
    has_hashtag,
    parse_reference_tables,
    parse_subscribers,
    parse_tweets,
    read_event_table,
    validate_refs,
)
from .mobility import (
    DEFAULT_HORIZON,
    PlacementMatrix,
    antenna_counts,
    build_placements,
    detect_drops,
    estimate_crossings,
    flow_matrix,
    group_timeseries,
    lost_at_border,
    province_counts,
)
from .privacy import (
    MOBILE_KEY_ENV,
    SOCIAL_KEY_ENV,
    PrivacyPolicy,
    dump_json,
    load_key,
    pseudonymize,
    scan_outputs,
)
from .sentiment import aggregate_scores, extreme_word_stats, load_lexicon, score_text
from .social import (
    DEFAULT_FENCE,
    activity_counts,
    destination_matrix,
    geofilter,
    load_country_polygons,
    load_fence,
    overlap_regions,
    resolve_und,
)
from .timeutil import DEFAULT_TZ, day_end, day_start, local_date, parse_offset, to_date

log = logging.getLogger(__name__)

STAGES = ("ingest", "cohort", "placements", "mobility", "flows", "social", "sentiment")
INTERNAL = "internal"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """Data-level failure inside a stage."""


class PrivacyScanError(RuntimeError):
    def __init__(self, violations):
        self.violations = violations
        super().__init__(f"{len(violations)} privacy violation(s), first: {violations[0]}")


def _period(raw, name: str) -> tuple[date, date]:
    try:
        a, b = (to_date(x) for x in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a pair of dates: {exc}") from None
    if b < a:
        raise ConfigError(f"{name} ends before it starts")
    return a, b


@dataclass
class RunConfig:
    output: Path
    events: Path | None = None
    cells: Path | None = None
    subscribers: Path | None = None
    visa_policy: Path | None = None
    lang_policy: Path | None = None
    dest_policy: Path | None = None
    tweets: Path | None = None
    fence: Path | None = None
    countries: Path | None = None
    lexicons: Path | None = None
    tz: str = DEFAULT_TZ
    workers: int = 1
    max_error_rate: float = DEFAULT_MAX_ERROR_RATE
    cohort: CohortSpec = field(default_factory=CohortSpec)
    horizon: tuple[date, date] = DEFAULT_HORIZON
    level: str = "province"
    backfill: bool = True
    flow_dates: tuple[date, date] | None = None
    drops_top_n: int = 3
    antenna_bucket: int = 3600
    antenna_provinces: tuple[str, ...] | None = None
    share: float = 0.5
    churn_floor: float = 0.5
    loss_period: tuple[date, date] | None = None
    border_period: tuple[date, date] = (date(2020, 2, 25), date(2020, 3, 25))
    followup_period: tuple[date, date] = (date(2020, 5, 1), date(2020, 12, 31))
    hashtags: tuple[str, ...] | None = None
    sentiment_granularity: str = "weekly"
    sentiment_window: int = 1
    privacy: PrivacyPolicy = field(default_factory=PrivacyPolicy)
    pseudonymize: bool = True
    mobile_key_env: str = MOBILE_KEY_ENV
    social_key_env: str = SOCIAL_KEY_ENV
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_toml(cls, path: str | os.PathLike, **overrides) -> "RunConfig":
        import tomli

        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
        return cls.from_dict(raw, base=path.parent, **overrides)

    @classmethod
    def from_dict(cls, raw: dict, base: str | os.PathLike = ".", **overrides) -> "RunConfig":
        base = Path(base)
        inputs = dict(raw.get("inputs", {}))
        root = base / inputs.pop("dir", ".")
        run = raw.get("run", {})
        co = raw.get("cohort", {})
        mo = raw.get("mobility", {})
        so = raw.get("social", {})
        se = raw.get("sentiment", {})
        pr = raw.get("privacy", {})
        known = {"events", "cells", "subscribers", "visa_policy", "lang_policy", "dest_policy", "tweets",
                 "fence", "countries", "lexicons"}
        unknown = set(inputs) - known
        if unknown:
            raise ConfigError(f"unknown input key(s): {sorted(unknown)}")
        kw: dict[str, Any] = {k: root / v for k, v in inputs.items()}
        try:
            kw["output"] = base / run.get("output", "out")
            kw["tz"] = run.get("tz", DEFAULT_TZ)
            parse_offset(kw["tz"])
            kw["workers"] = int(run.get("workers", 1))
            kw["max_error_rate"] = float(run.get("max_error_rate", DEFAULT_MAX_ERROR_RATE))
            cs = CohortSpec()
            kw["cohort"] = CohortSpec(
                border_provinces=frozenset(co.get("border_provinces", cs.border_provinces)),
                start=to_date(co.get("start", cs.start)),
                end=to_date(co.get("end", cs.end)),
                top_k=int(co.get("top_k", cs.top_k)),
            )
            kw["horizon"] = _period(mo.get("horizon", DEFAULT_HORIZON), "mobility.horizon")
            kw["level"] = mo.get("level", "province")
            kw["backfill"] = bool(mo.get("backfill", True))
            if "flow_dates" in mo:
                kw["flow_dates"] = _period(mo["flow_dates"], "mobility.flow_dates")
            kw["drops_top_n"] = int(mo.get("drops_top_n", 3))
            kw["antenna_bucket"] = int(mo.get("antenna_bucket", 3600))
            if "antenna_provinces" in mo:
                kw["antenna_provinces"] = tuple(mo["antenna_provinces"])
            kw["share"] = float(mo.get("share", 0.5))
            kw["churn_floor"] = float(mo.get("churn_floor", 0.5))
            if "loss_period" in mo:
                kw["loss_period"] = _period(mo["loss_period"], "mobility.loss_period")
            kw["border_period"] = _period(so.get("border_period", cls.border_period), "social.border_period")
            kw["followup_period"] = _period(so.get("followup_period", cls.followup_period), "social.followup_period")
            if "hashtags" in so:
                tags = so["hashtags"]
                kw["hashtags"] = DEFAULT_HASHTAGS if tags == "default" else tuple(tags)
            kw["sentiment_granularity"] = se.get("granularity", "weekly")
            kw["sentiment_window"] = int(se.get("window", 1))
            kw["privacy"] = PrivacyPolicy(k=int(pr.get("k", 10)), spatial_floor=pr.get("spatial_floor", "province"))
            kw["pseudonymize"] = bool(pr.get("pseudonymize", True))
            kw["mobile_key_env"] = pr.get("mobile_key_env", MOBILE_KEY_ENV)
            kw["social_key_env"] = pr.get("social_key_env", SOCIAL_KEY_ENV)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if kw["level"] not in ("province", "district"):
            raise ConfigError(f"unknown spatial level {kw['level']!r}")
        if kw["sentiment_granularity"] not in ("daily", "weekly"):
            raise ConfigError("sentiment.granularity must be daily or weekly")
        if kw["workers"] < 1:
            raise ConfigError("run.workers must be >= 1")
        kw.update(overrides)
        kw["raw"] = raw
        return cls(**kw)

    @property
    def internal(self) -> Path:
        return self.output / INTERNAL

    def config_hash(self) -> str:
        """Digest of the configuration; thread count and output location excluded."""
        raw = json.loads(json.dumps(self.raw, default=str))
        raw.get("run", {}).pop("workers", None)
        raw.get("run", {}).pop("output", None)
        return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()

    def require(self, *names: str) -> None:
        for name in names:
            p = getattr(self, name)
            if p is None:
                raise ConfigError(f"input '{name}' is not configured")
            if not Path(p).exists():
                raise ConfigError(f"input '{name}' not found: {p}")

    def ingest_window(self) -> tuple[date, date]:
        """Observation horizon for parsing: cohort window and mobility horizon together."""
        return min(self.cohort.start, self.horizon[0]), max(self.cohort.end, self.horizon[1])


# ----------------------------------------------------------------------------
# digests


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digests(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for name in ("events", "cells", "subscribers", "visa_policy", "lang_policy", "dest_policy", "tweets",
                 "fence", "countries", "lexicons"):
        p = getattr(cfg, name)
        if p is None or not Path(p).exists():
            continue
        if Path(p).is_dir():
            for f in sorted(Path(p).iterdir()):
                if f.is_file():
                    out[f"{name}/{f.name}"] = sha256_file(f)
        else:
            out[name] = sha256_file(p)
    return out


def output_digests(directory: str | os.PathLike) -> dict[str, str]:
    """Digests of the published files of a run (run manifest excluded)."""
    return {
        p.name: sha256_file(p)
        for p in sorted(Path(directory).iterdir())
        if p.is_file() and p.name != "run_manifest.json" and not p.name.endswith(".tmp")
    }


# ----------------------------------------------------------------------------
# stages


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _load_refs(cfg: RunConfig):
    cfg.require("cells", "subscribers", "visa_policy")
    return parse_reference_tables(cfg.cells, cfg.subscribers, cfg.visa_policy, cfg.lang_policy, cfg.dest_policy)


def stage_ingest(cfg: RunConfig) -> dict:
    cfg.require("events", "cells", "subscribers", "visa_policy")
    refs = _load_refs(cfg)
    offset = parse_offset(cfg.tz)
    lo_d, hi_d = cfg.ingest_window()
    table, diags, total = read_event_table(
        cfg.events, horizon=(day_start(lo_d, offset), day_end(hi_d, offset)), max_error_rate=cfg.max_error_rate
    )
    report = validate_refs(table, refs.registry, refs.subscribers)
    report.raise_if_fatal()
    table = drop_unknown_subscribers(table, refs.subscribers)
    subscribers = refs.subscribers
    if cfg.pseudonymize:
        key = load_key(cfg.mobile_key_env)
        table = table.rename_subscribers(lambda s: pseudonymize(s, key))
        subscribers = {
            pseudonymize(s, key): Subscriber(pseudonymize(s, key), sub.nationality) for s, sub in subscribers.items()
        }
    cfg.internal.mkdir(parents=True, exist_ok=True)
    table.save(cfg.internal / "events.npz")
    lines = ["subscriber_id,nationality"] + [f"{s},{subscribers[s].nationality}" for s in sorted(subscribers)]
    _write_atomic(cfg.internal / "subscribers.csv", ("\n".join(lines) + "\n").encode())
    info: dict[str, Any] = {
        "events_total": total,
        "events_rejected": len(diags),
        "events_kept": len(table),
        "unknown_subscriber_events": report.excluded_events,
    }
    diag_lines = [str(d) for d in diags]
    if cfg.tweets is not None and Path(cfg.tweets).exists():
        tw = parse_tweets(cfg.tweets, max_error_rate=cfg.max_error_rate)
        tweets = tw.records
        if cfg.hashtags is not None:
            tweets = [t for t in tweets if has_hashtag(t.text, cfg.hashtags)]
        if cfg.pseudonymize:
            from dataclasses import replace

            tkey = load_key(cfg.social_key_env)
            tweets = [replace(t, user_id=pseudonymize(t.user_id, tkey)) for t in tweets]
        _write_atomic(cfg.internal / "tweets.ndjson", "".join(format_tweets(tweets)).encode("utf-8"))
        info["tweets_total"] = tw.total
        info["tweets_rejected"] = tw.rejected
        info["tweets_kept"] = len(tweets)
        diag_lines += [f"tweets {d}" for d in tw.diagnostics]
    _write_atomic(cfg.internal / "diagnostics.txt", ("\n".join(diag_lines) + "\n").encode("utf-8"))
    _write_atomic(cfg.internal / "ingest.json", dump_json(info))
    return info


def _load_events(cfg: RunConfig) -> EventTable:
    return EventTable.load(cfg.internal / "events.npz")


def _load_cohort(cfg: RunConfig) -> dict[str, MobilityClass]:
    out = {}
    with open(cfg.internal / "cohort.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            sid, cls, _ = line.rstrip("\n").split(",")
            out[sid] = MobilityClass(cls)
    return out


def stage_cohort(cfg: RunConfig) -> dict:
    refs = _load_refs(cfg)
    table = _load_events(cfg)
    subscribers = parse_subscribers(cfg.internal / "subscribers.csv")
    cohort = build_cohort(table, refs.registry, subscribers, refs.visa, cfg.cohort, tz=cfg.tz)
    lines = ["subscriber_id,class,nationality"] + [",".join(r) for r in cohort.rows()]
    _write_atomic(cfg.internal / "cohort.csv", ("\n".join(lines) + "\n").encode("utf-8"))
    return {"members": len(cohort.members), "excluded": dict(sorted(cohort.excluded.items()))}


def stage_placements(cfg: RunConfig) -> dict:
    refs = _load_refs(cfg)
    table = _load_events(cfg)
    members = _load_cohort(cfg)
    pm = build_placements(
        table, refs.registry, cfg.horizon, members=members, tz=cfg.tz, level=cfg.level, workers=cfg.workers
    )
    pm.save(cfg.internal / "placements.npz")
    return {"placed": len(pm.sub_ids), "excluded": len(pm.excluded)}


def _border_areas(cfg: RunConfig, refs) -> set[str]:
    if cfg.level == "province":
        return set(cfg.cohort.border_provinces)
    return {c.district for c in refs.registry.values() if c.province in cfg.cohort.border_provinces and c.district}


def stage_mobility(cfg: RunConfig) -> dict:
    refs = _load_refs(cfg)
    pm = PlacementMatrix.load(cfg.internal / "placements.npz")
    class_of = _load_cohort(cfg)
    policy = cfg.privacy
    border = _border_areas(cfg, refs)
    gs = group_timeseries(pm, class_of, border, backfill=cfg.backfill)
    out = cfg.output
    outputs.publish(out, "group_timeseries.csv", outputs.group_timeseries_table(gs), policy)
    snaps = [province_counts(pm, d, backfill=cfg.backfill) for d in pm.dates]
    outputs.publish(out, "province_counts.csv", outputs.province_counts_table(snaps, cfg.level), policy)
    table = _load_events(cfg)
    provinces = cfg.antenna_provinces if cfg.antenna_provinces is not None else sorted(cfg.cohort.border_provinces)
    ac = antenna_counts(table, refs.registry, cfg.antenna_bucket, tz=cfg.tz, provinces=provinces)
    outputs.publish(out, "antenna_counts.csv", outputs.antenna_table(ac), policy)
    active = gs.active()
    drops = detect_drops(active, top_n=cfg.drops_top_n) if len(active) >= 2 else []
    outputs.publish(out, "drops.csv", outputs.drops_table(drops, active), policy)
    lost = lost_at_border(pm, class_of, border, cfg.loss_period)
    estimates = [estimate_crossings(n, cfg.share, cfg.churn_floor, cls.value) for cls, n in lost.items()]
    outputs.publish(out, "estimates.json", outputs.estimates_table(estimates), policy)
    return {"dates": len(pm.dates), "drops": [d.isoformat() for d, _ in drops]}


def stage_flows(cfg: RunConfig) -> dict:
    pm = PlacementMatrix.load(cfg.internal / "placements.npz")
    a, b = cfg.flow_dates or (pm.start, pm.end)
    fm = flow_matrix(pm, a, b, backfill=cfg.backfill)
    outputs.publish(cfg.output, "flows.json", outputs.flows_document(fm, cfg.privacy), cfg.privacy)
    return {"date_a": a.isoformat(), "date_b": b.isoformat(), "total": fm.total}


def _load_tweets(cfg: RunConfig):
    return parse_tweets(cfg.internal / "tweets.ndjson", max_error_rate=None).records


def _border_tweets(cfg: RunConfig, tweets):
    fence = load_fence(cfg.fence) if cfg.fence is not None else DEFAULT_FENCE
    offset = parse_offset(cfg.tz)
    lo, hi = cfg.border_period
    in_period = [t for t in tweets if lo <= local_date(t.ts, offset) <= hi]
    return geofilter(in_period, fence)


def stage_social(cfg: RunConfig) -> dict:
    refs = _load_refs(cfg)
    tweets = _load_tweets(cfg)
    filtered = _border_tweets(cfg, tweets)
    res = resolve_und(filtered.tweets)
    policy = cfg.privacy
    out = cfg.output
    total = activity_counts(res.tweets, refs.languages, tz=cfg.tz)
    daily = activity_counts(res.tweets, refs.languages, granularity="daily", tz=cfg.tz)
    outputs.publish(out, "lang_counts.csv", outputs.lang_counts_table(total), policy)
    outputs.publish(out, "daily_lang_counts.csv", outputs.daily_lang_counts_table(daily), policy)
    countries = load_country_polygons(cfg.countries) if cfg.countries is not None else None
    border_users = {t.user_id for t in filtered.tweets}
    dm = destination_matrix(
        tweets, border_users, cfg.followup_period, refs.languages, refs.destinations, countries=countries, tz=cfg.tz
    )
    outputs.publish(out, "dest_matrix.csv", outputs.dest_matrix_table(dm), policy)
    outputs.publish(out, "dest_presence.json", outputs.presence_table(dm), policy)
    regions = {
        "language": overlap_regions(dm.user_groups, ["Visa", "NoVisa", "Turkish"]),
        "destination": overlap_regions(dm.user_destinations, ["Europe", "Turkey", "Other"]),
    }
    outputs.publish(out, "venn.json", outputs.venn_document(regions, policy), policy)
    return {
        "border_tweets": len(filtered.tweets),
        "dropped": dict(sorted(filtered.dropped.items())),
        "unresolved_und": res.unresolved,
        "border_users": len(border_users),
        "present": dm.present,
    }


def load_lexicons(directory: Path | None) -> dict:
    if directory is None or not Path(directory).is_dir():
        return {}
    return {p.stem: load_lexicon(p) for p in sorted(Path(directory).glob("*.csv"))}


def stage_sentiment(cfg: RunConfig) -> dict:
    tweets = _load_tweets(cfg)
    filtered = _border_tweets(cfg, tweets)
    res = resolve_und(filtered.tweets)
    lexicons = load_lexicons(cfg.lexicons)
    if not lexicons:
        raise ConfigError("sentiment stage needs at least one lexicon")
    scored, corpus = [], {lang: [] for lang in lexicons}
    for t in res.tweets:
        lex = lexicons.get(t.lang)
        if lex is None:
            continue
        scored.append((t.lang, t.ts, score_text(t.text, lex, cfg.sentiment_window).composite))
        corpus[t.lang].append(t.text or "")
    stats = aggregate_scores(scored, cfg.sentiment_granularity, tz=cfg.tz)
    bucket = "iso_week" if cfg.sentiment_granularity == "weekly" else "date"
    name = "sentiment_weekly.csv" if cfg.sentiment_granularity == "weekly" else "sentiment_daily.csv"
    outputs.publish(cfg.output, name, outputs.sentiment_table(stats, name, bucket), cfg.privacy)
    outputs.publish(cfg.output, "extreme_words.csv", outputs.extreme_words_table(extreme_word_stats(corpus, lexicons)), cfg.privacy)
    return {"scored": len(scored), "buckets": len(stats)}


STAGE_FUNCS: dict[str, Callable[[RunConfig], dict]] = {
    "ingest": stage_ingest,
    "cohort": stage_cohort,
    "placements": stage_placements,
    "mobility": stage_mobility,
    "flows": stage_flows,
    "social": stage_social,
    "sentiment": stage_sentiment,
}

# stage -> (upstream stage, artifact it leaves under internal/)
REQUIRES: dict[str, list[tuple[str, str]]] = {
    "ingest": [],
    "cohort": [("ingest", "events.npz")],
    "placements": [("ingest", "events.npz"), ("cohort", "cohort.csv")],
    "mobility": [("ingest", "events.npz"), ("cohort", "cohort.csv"), ("placements", "placements.npz")],
    "flows": [("placements", "placements.npz")],
    "social": [("ingest", "tweets.ndjson")],
    "sentiment": [("ingest", "tweets.ndjson")],
}


# a requested mobility stage brings its placement and flow steps along
STAGE_GROUPS = {"mobility": ("placements", "mobility", "flows")}


def resolve_stages(requested) -> list[str]:
    if requested is None or requested == "all":
        return list(STAGES)
    if isinstance(requested, str):
        requested = [s.strip() for s in requested.split(",") if s.strip()]
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; known: {', '.join(STAGES)}")
    wanted = {x for s in requested for x in STAGE_GROUPS.get(s, (s,))}
    return [s for s in STAGES if s in wanted]


def check_upstream(cfg: RunConfig, stages: list[str]) -> None:
    scheduled = set(stages)
    for stage in stages:
        for upstream, artifact in REQUIRES[stage]:
            if upstream not in scheduled and not (cfg.internal / artifact).exists():
                raise StageError(f"MISSING_STAGE:{upstream}")


def run_pipeline(cfg: RunConfig, stages=None) -> dict:
    """Run ``stages`` in dependency order, scan the outputs, write the run manifest."""
    stages = resolve_stages(stages)
    cfg.output.mkdir(parents=True, exist_ok=True)
    check_upstream(cfg, stages)
    timings, summaries = {}, {}
    for stage in stages:
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        try:
            summaries[stage] = STAGE_FUNCS[stage](cfg)
        except IngestError as exc:
            raise StageError(f"{stage}: {exc}") from exc
        timings[stage] = round(time.perf_counter() - t0, 4)
    _write_atomic(cfg.output / "privacy.json", dump_json(cfg.privacy.metadata()))
    violations = scan_outputs(cfg.output, cfg.privacy.k)
    manifest = {
        "config_hash": cfg.config_hash(),
        "stages": stages,
        "workers": cfg.workers,
        "inputs": _input_digests(cfg),
        "timings": timings,
        "summaries": summaries,
        "outputs": output_digests(cfg.output),
        "privacy_scan": {"k": cfg.privacy.k, "violations": [str(v) for v in violations]},
        "status": "failed" if violations else "ok",
    }
    _write_atomic(cfg.output / "run_manifest.json", dump_json(manifest))
    if violations:
        raise PrivacyScanError(violations)
    return manifest
