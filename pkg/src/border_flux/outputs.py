"""Aggregates to publishable tables, and the privacy-gated writer.

Each ``*_table`` function is the direct computation behind one published
file; :func:`publish` is the only code path that writes into a run's output
directory, and it always suppresses first.
"""
from __future__ import annotations

import os
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .mobility import GROUP_COLUMNS, AreaCounts, CrossingEstimate, FlowMatrix, GroupSeries
from .privacy import PrivacyPolicy, Table, dump_json, suppress_table, table_to_csv
from .sentiment import BucketStats, ExtremeStats
from .social import ActivityCounts, DestinationMatrix


def group_timeseries_table(gs: GroupSeries) -> Table:
    rows = [[d.isoformat(), *vals] for d, *vals in gs.rows()]
    return Table("group_timeseries.csv", ["date", *GROUP_COLUMNS], rows, count_columns=GROUP_COLUMNS)


def province_counts_table(snapshots: Iterable[AreaCounts], level: str = "province") -> Table:
    rows = []
    for snap in snapshots:
        d = snap.date.isoformat()
        for area in sorted(snap.counts):
            rows.append([d, level, area, snap.counts[area]])
        rows.append([d, level, "LOST", snap.lost])
        if snap.unplaced:
            rows.append([d, level, "UNOBSERVED", snap.unplaced])
    return Table("province_counts.csv", ["date", "level", "area", "count"], rows, count_columns=("count",))


def flow_links_table(fm: FlowMatrix) -> Table:
    sk = fm.sankey()
    rows = [[l["source"], l["target"], l["value"]] for l in sk["links"]]
    return Table("flows.json", ["source", "target", "value"], rows, count_columns=("value",))


def flows_document(fm: FlowMatrix, policy: PrivacyPolicy) -> dict:
    links = suppress_table(flow_links_table(fm), policy).records()
    sk = fm.sankey()
    return {"date_a": sk["date_a"], "date_b": sk["date_b"], "nodes": sk["nodes"], "links": links}


def antenna_table(counts: Mapping[tuple[str, int], int]) -> Table:
    rows = [[cell, bucket, n] for (cell, bucket), n in sorted(counts.items())]
    return Table("antenna_counts.csv", ["cell_id", "bucket_start", "devices"], rows, count_columns=("devices",))


def drops_table(drops: Sequence[tuple[date, float]], active: Mapping[date, int]) -> Table:
    days = sorted(active)
    prev = {d1: active[d0] for d0, d1 in zip(days, days[1:])}
    rows = [[d.isoformat(), prev[d], active[d], rel] for d, rel in drops]
    return Table(
        "drops.csv", ["date", "previous", "count", "relative_drop"], rows,
        count_columns=("previous", "count"), row_guard=("previous", "count"), dependent_columns=("relative_drop",),
    )


def estimates_table(estimates: Iterable[CrossingEstimate]) -> Table:
    rows = [[e.group, e.lost_at_border, e.share, e.churn_floor, e.low, e.high] for e in estimates]
    return Table(
        "estimates.json", ["group", "lost_at_border", "share", "churn_floor", "low", "high"], rows,
        count_columns=("lost_at_border", "low", "high"), row_guard=("lost_at_border",),
        dependent_columns=("low", "high"),
    )


def lang_counts_table(ac: ActivityCounts, key_name: str = "group") -> Table:
    rows = [[k, ac.tweets[k], ac.users[k]] for k in sorted(ac.tweets)]
    return Table("lang_counts.csv", [key_name, "tweets", "users"], rows, count_columns=("tweets", "users"))


def daily_lang_counts_table(ac: ActivityCounts, key_name: str = "group") -> Table:
    rows = [[d.isoformat(), k, ac.tweets[(d, k)], ac.users[(d, k)]] for d, k in sorted(ac.tweets)]
    return Table(
        "daily_lang_counts.csv", ["date", key_name, "tweets", "users"], rows, count_columns=("tweets", "users")
    )


def dest_matrix_table(dm: DestinationMatrix) -> Table:
    return Table(
        "dest_matrix.csv", ["group", "destination", "users"], [list(r) for r in dm.rows()], count_columns=("users",)
    )


def presence_table(dm: DestinationMatrix) -> Table:
    return Table(
        "dest_presence.json", ["present", "disappeared"], [[dm.present, dm.disappeared]],
        count_columns=("present", "disappeared"),
    )


def venn_table(regions: Mapping[str, Sequence[tuple[tuple[str, ...], int]]]) -> Table:
    rows = [[dim, "|".join(s), n] for dim, regs in regions.items() for s, n in regs]
    return Table("venn.json", ["dimension", "set", "count"], rows, count_columns=("count",))


def venn_document(regions: Mapping[str, Sequence[tuple[tuple[str, ...], int]]], policy: PrivacyPolicy) -> list:
    recs = suppress_table(venn_table(regions), policy).records()
    out = []
    for dim in regions:
        out.append({
            "dimension": dim,
            "regions": [{"set": r["set"].split("|"), "count": r["count"]} for r in recs if r["dimension"] == dim],
        })
    return out


def sentiment_table(stats: Mapping[tuple[str, str], BucketStats], name: str = "sentiment_weekly.csv", bucket: str = "iso_week") -> Table:
    rows = [[lang, b, float(s.mean), float(s.variance), s.n] for (lang, b), s in sorted(stats.items())]
    return Table(
        name, ["language", bucket, "mean", "variance", "n"], rows,
        count_columns=("n",), row_guard=("n",), dependent_columns=("mean", "variance"),
    )


def extreme_words_table(stats: Mapping[str, ExtremeStats]) -> Table:
    rows = [[lang, s.words, s.extreme, s.fraction, s.percent] for lang, s in sorted(stats.items())]
    return Table(
        "extreme_words.csv", ["language", "words", "extreme", "fraction", "percent"], rows,
        count_columns=("words", "extreme"), row_guard=("extreme",), dependent_columns=("fraction", "percent"),
    )


def render(table: Table, policy: PrivacyPolicy) -> bytes:
    """Suppressed bytes of a table as they would be published."""
    safe = suppress_table(table, policy)
    if table.name.endswith(".csv"):
        return table_to_csv(safe)
    recs = safe.records()
    return dump_json(recs[0] if table.name == "dest_presence.json" else recs)


def publish(directory: str | os.PathLike, name: str, payload: Table | dict | list, policy: PrivacyPolicy) -> Path:
    """Write one published file. Tables are suppressed here; documents must be built suppressed."""
    path = Path(directory) / name
    data = render(payload, policy) if isinstance(payload, Table) else dump_json(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path
