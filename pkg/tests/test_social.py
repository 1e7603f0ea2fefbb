from __future__ import annotations

from collections import Counter, defaultdict
from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from border_flux.ingest import Destination, LanguageGroup, Tweet, parse_tweets
from border_flux.social import (
    DEFAULT_FENCE,
    GeoFence,
    activity_counts,
    classify_destination,
    destination_matrix,
    geofilter,
    load_country_polygons,
    load_fence,
    map_language_group,
    overlap_regions,
    point_in_polygon,
    resolve_und,
)
from border_flux.timeutil import local_date, parse_offset

from conftest import scenario_config

TZ3 = timezone(timedelta(hours=3))
LANG = {"tr": LanguageGroup.TURKISH, "en": LanguageGroup.NO_VISA, "el": LanguageGroup.NO_VISA,
        "ar": LanguageGroup.VISA, "fa": LanguageGroup.VISA}
DEST = {"TUR": Destination.TURKEY, "DEU": Destination.EUROPE, "GRC": Destination.EUROPE, "USA": Destination.OTHER}


def at(y, m, d, h=12):
    return int(datetime(y, m, d, h, tzinfo=TZ3).timestamp())


def tw(i, user, lang, ts=None, lat=None, lon=None, country=None, text=None):
    return Tweet(f"t{i}", user, ts if ts is not None else at(2020, 3, 1) + i, lang, lat, lon, country, text)


# geometry and geofilter

SQUARE = (((0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)), ((4.0, 4.0), (6.0, 4.0), (6.0, 6.0), (4.0, 6.0)))


@pytest.mark.parametrize("pt,inside", [((1, 1), True), ((5, 5), False), ((11, 5), False), ((9.9, 0.1), True)])
def test_point_in_polygon_with_hole(pt, inside):
    assert point_in_polygon(*pt, SQUARE) is inside


def test_geofilter_keeps_turkish_side():
    t = tw(0, "a", "tr", lat=41.4, lon=27.3, country="TUR")
    res = geofilter([t])
    assert res.tweets == [t]


def test_geofilter_drops_greek_side():
    t = tw(0, "a", "el", lat=41.2, lon=26.05, country="GRC")
    res = geofilter([t])
    assert res.tweets == [] and res.dropped["outside_territory"] == 1


def test_geofilter_drops_outside_box():
    res = geofilter([tw(0, "a", "tr", lat=40.9, lon=29.5, country="TUR")])
    assert res.tweets == [] and res.dropped["outside_bbox"] == 1


def test_geofilter_counts_unlocated():
    res = geofilter([tw(0, "a", "tr"), tw(1, "a", "tr", country="TUR")])
    assert res.tweets == []
    assert res.dropped == Counter({"no_location": 1, "no_coordinates": 1})


def test_country_predicate_fence():
    fence = GeoFence(((26.0, 40.0, 28.0, 42.0),))
    keep = tw(0, "a", "tr", lat=41.0, lon=27.0, country="TUR")
    drop = tw(1, "a", "tr", lat=41.0, lon=27.0, country="BGR")
    assert geofilter([keep, drop], fence).tweets == [keep]


def test_fence_geojson_round_trip():
    assert load_fence(DEFAULT_FENCE.to_geojson()) == DEFAULT_FENCE


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        GeoFence(((1.0, 1.0, 1.0, 2.0),))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(25.5, 28.5), st.floats(40.3, 42.3), st.sampled_from(["TUR", "GRC", None])), max_size=40))
def test_geofilter_idempotent(points):
    tweets = [tw(i, "u", "tr", lat=la, lon=lo, country=c) for i, (lo, la, c) in enumerate(points)]
    once = geofilter(tweets).tweets
    assert geofilter(once).tweets == once
    assert len(once) + sum(geofilter(tweets).dropped.values()) == len(tweets)


# und resolution


def test_und_takes_majority():
    res = resolve_und([tw(0, "a", "tr"), tw(1, "a", "tr"), tw(2, "a", "tr"), tw(3, "a", "und")])
    assert [t.lang for t in res.tweets] == ["tr"] * 4
    assert res.profiles["a"].resolved_und == "tr" and res.unresolved == 0


def test_user_without_und_unchanged():
    tweets = [tw(0, "a", "en"), tw(1, "a", "tr")]
    assert resolve_und(tweets).tweets == tweets


def test_und_tie_goes_to_latest_labelled():
    tweets = [tw(0, "a", "tr"), tw(1, "a", "en"), tw(2, "a", "en"), tw(3, "a", "tr"), tw(4, "a", "und")]
    assert resolve_und(tweets).tweets[-1].lang == "tr"
    tweets = [tw(0, "a", "tr"), tw(1, "a", "tr"), tw(2, "a", "en"), tw(3, "a", "en"), tw(4, "a", "und")]
    assert resolve_und(tweets).tweets[-1].lang == "en"


def test_all_und_user_stays_unresolved():
    res = resolve_und([tw(0, "a", "und"), tw(1, "a", "und"), tw(2, "b", "tr")])
    assert res.unresolved == 2 and res.unresolved_users == {"a"}
    assert len(res.labelled()) == 1


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from(["tr", "en", "ar", "und"])), max_size=40))
def test_und_resolution_properties(rows):
    tweets = [tw(i, u, lang) for i, (u, lang) in enumerate(rows)]
    res = resolve_und(tweets)
    by_user = defaultdict(list)
    for t in tweets:
        by_user[t.user_id].append(t.lang)
    all_und = {u for u, ls in by_user.items() if set(ls) == {"und"}}
    assert res.unresolved == sum(len(by_user[u]) for u in all_und)
    for t in res.tweets:
        assert (t.lang == "und") == (t.user_id in all_und)
    for u, ls in by_user.items():
        c = Counter(l for l in ls if l != "und")
        if c:
            assert c[res.profiles[u].resolved_und] == max(c.values())


# groups and activity


def test_language_group_lookup():
    assert map_language_group("tr", LANG) is LanguageGroup.TURKISH
    assert map_language_group("en", LANG) is LanguageGroup.NO_VISA
    assert map_language_group("xx", LANG) is LanguageGroup.UNASSIGNED


def test_activity_counts_fixture():
    tweets = [tw(i, "a" if i < 3 else "b", "tr") for i in range(5)]
    ac = activity_counts(tweets, LANG)
    assert (ac.tweets["Turkish"], ac.users["Turkish"]) == (5, 2)


def test_activity_counts_empty():
    ac = activity_counts([], LANG)
    assert ac.tweets == {"Visa": 0, "NoVisa": 0, "Turkish": 0}
    assert ac.users == {"Visa": 0, "NoVisa": 0, "Turkish": 0}


def test_user_counted_once_per_group():
    ac = activity_counts([tw(0, "a", "tr"), tw(1, "a", "en"), tw(2, "a", "tr"), tw(3, "x", "xx")], LANG)
    assert ac.users["Turkish"] == 1 and ac.users["NoVisa"] == 1 and ac.tweets["Turkish"] == 2
    assert ac.excluded["unassigned"] == 1


def test_daily_counts_use_local_date():
    late = int(datetime(2020, 3, 1, 22, 30, tzinfo=timezone.utc).timestamp())
    ac = activity_counts([tw(0, "a", "tr", ts=late)], LANG, granularity="daily")
    assert ac.tweets == {(date(2020, 3, 2), "Turkish"): 1}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcde"), st.sampled_from(list(LANG)), st.integers(0, 5)), max_size=50))
def test_users_never_exceed_tweets(rows):
    tweets = [tw(i, u, lang, ts=at(2020, 3, 1 + d)) for i, (u, lang, d) in enumerate(rows)]
    for gran in ("total", "daily"):
        ac = activity_counts(tweets, LANG, granularity=gran)
        assert all(ac.users[k] <= ac.tweets[k] for k in ac.tweets)
        assert sum(ac.tweets.values()) == len(tweets)


# destinations


def test_classify_destination():
    assert classify_destination(tw(0, "a", "tr", country="TUR"), DEST) is Destination.TURKEY
    assert classify_destination(tw(0, "a", "tr", country="DEU"), DEST) is Destination.EUROPE
    assert classify_destination(tw(0, "a", "tr", country="USA"), DEST) is Destination.OTHER
    assert classify_destination(tw(0, "a", "tr"), DEST) is None


def test_destination_from_country_polygons():
    doc = {"features": [{"properties": {"iso_a3": "DEU"},
                         "geometry": {"type": "Polygon", "coordinates": [[[6, 47], [15, 47], [15, 55], [6, 55]]]}}]}
    polys = load_country_polygons(doc)
    assert classify_destination(tw(0, "a", "tr", lat=52.5, lon=13.4), DEST, polys) is Destination.EUROPE
    assert classify_destination(tw(0, "a", "tr", lat=0.0, lon=0.0), DEST, polys) is None


FOLLOW = at(2020, 6, 1)


def test_destination_distinct_users():
    tweets = [tw(i, "a", "tr", ts=FOLLOW + i, country="TUR") for i in range(5)]
    dm = destination_matrix(tweets, {"a"}, lang_policy=LANG, dest_policy=DEST)
    assert dm.counts == {(LanguageGroup.TURKISH, Destination.TURKEY): 1}
    assert dm.present == 1 and dm.disappeared == 0


def test_destination_pairs_follow_each_tweet():
    tweets = [tw(0, "a", "tr", ts=FOLLOW, country="TUR"), tw(1, "a", "en", ts=FOLLOW + 1, country="DEU")]
    dm = destination_matrix(tweets, {"a"}, lang_policy=LANG, dest_policy=DEST)
    assert dm.counts == {(LanguageGroup.TURKISH, Destination.TURKEY): 1, (LanguageGroup.NO_VISA, Destination.EUROPE): 1}


def test_no_followup_tweets():
    dm = destination_matrix([tw(0, "a", "tr", ts=at(2020, 3, 1), country="TUR")], {"a", "b"},
                            lang_policy=LANG, dest_policy=DEST)
    assert dm.present == 0 and dm.disappeared == 2 and dm.counts == {}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from(list(LANG) + ["und"]), st.sampled_from(list(DEST))),
                max_size=30), st.integers(1, 3))
def test_destination_invariant_under_duplication(rows, times):
    tweets = [tw(i, u, lang, ts=FOLLOW + i, country=c) for i, (u, lang, c) in enumerate(rows)]
    once = destination_matrix(tweets, "abc", lang_policy=LANG, dest_policy=DEST)
    many = destination_matrix(tweets * times, "abc", lang_policy=LANG, dest_policy=DEST)
    assert once.counts == many.counts and once.present == many.present


# overlap regions


def test_single_group_users():
    regions = dict(overlap_regions({"a": {"Turkish"}, "b": {"Turkish"}}, ["Visa", "NoVisa", "Turkish"]))
    assert regions[("Turkish",)] == 2
    assert sum(regions.values()) == 2 and len(regions) == 7


def test_user_in_all_groups():
    regions = dict(overlap_regions({"a": {"Visa", "NoVisa", "Turkish"}}, ["Visa", "NoVisa", "Turkish"]))
    assert regions[("Visa", "NoVisa", "Turkish")] == 1 and sum(regions.values()) == 1


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        overlap_regions({"a": {"Martian"}}, ["Visa"])


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text("abcdef", min_size=1, max_size=3), st.sets(st.sampled_from(["Visa", "NoVisa", "Turkish"]))))
def test_regions_partition_users(user_sets):
    regions = overlap_regions(user_sets, ["Visa", "NoVisa", "Turkish"])
    assert sum(n for _, n in regions) == sum(1 for s in user_sets.values() if s)
    assert len({frozenset(r) for r, _ in regions}) == 7


# synthetic tweets against the generator's manifest


@pytest.fixture(scope="module")
def synthetic_tweets(world):
    d, manifest = world
    return parse_tweets(d / "tweets.ndjson").records, manifest["tweets"], scenario_config().tweets


def test_border_und_resolution_matches_manifest(synthetic_tweets):
    tweets, truth, tc = synthetic_tweets
    offset = parse_offset("+03:00")
    period = [t for t in tweets if tc.border_period[0] <= local_date(t.ts, offset) <= tc.border_period[1]]
    kept = geofilter(period).tweets
    stats = truth["border_period"]
    assert len(kept) == stats["tweets"]
    res = resolve_und(kept)
    assert res.unresolved == stats["all_und_user_tweets"]
    assert sorted(res.unresolved_users) == stats["all_und_users"]


def test_followup_venn_matches_manifest(synthetic_tweets, world):
    tweets, truth, tc = synthetic_tweets
    d, _ = world
    from border_flux.ingest import parse_destination_policy, parse_language_policy

    lang = parse_language_policy(d / "lang_policy.csv")
    dest = parse_destination_policy(d / "dest_policy.csv")
    users = sorted({t.user_id for t in tweets})
    dm = destination_matrix(tweets, users, tc.followup_period, lang, dest)
    assert dm.present == len(truth["present_users"])
    got_lang = overlap_regions(dm.user_groups, ["Visa", "NoVisa", "Turkish"])
    got_dest = overlap_regions(dm.user_destinations, ["Europe", "Turkey", "Other"])
    assert [[list(r), n] for r, n in got_lang] == truth["venn"]["language"]
    assert [[list(r), n] for r, n in got_dest] == truth["venn"]["destination"]
