from __future__ import annotations

import json
import re
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from border_flux.ingest import (
    CellRegistry,
    CellSite,
    Destination,
    ErrorBudgetExceeded,
    EventTable,
    IngestError,
    LanguageGroup,
    MobilityClass,
    Subscriber,
    XdrEvent,
    drop_unknown_subscribers,
    format_tweets,
    format_xdr,
    has_hashtag,
    normalize_lang,
    parse_cell_registry,
    parse_destination_policy,
    parse_language_policy,
    parse_reference_tables,
    parse_subscribers,
    parse_tweets,
    parse_visa_policy,
    parse_xdr,
    read_event_table,
    validate_refs,
)

HEADER = "subscriber_id,ts,cell_id,kind\n"


def test_single_line_maps_fields():
    res = parse_xdr(HEADER + "u1,1582848000,c9,data\n")
    assert res.records == [XdrEvent("u1", 1582848000, "c9", "data")]
    assert res.diagnostics == []


def test_malformed_timestamp_names_line_and_field():
    res = parse_xdr(HEADER + "u1,1582848000,c9,data\nu1,not-a-time,c9,data\n", max_error_rate=None)
    assert len(res.records) == 1
    (d,) = res.diagnostics
    assert d.line == 3 and d.field == "ts"
    assert "not-a-time" in str(d) and "line 3" in str(d)


def test_kind_defaults_to_data_and_is_validated():
    res = parse_xdr(HEADER + "u1,5,c1,\nu1,6,c1,CALL\nu1,7,c1,sms\n", max_error_rate=None)
    assert [e.kind for e in res.records] == ["data", "call"]
    assert res.diagnostics[0].field == "kind"


def test_ndjson_encoding():
    text = "\n".join(json.dumps(o) for o in [
        {"subscriber_id": "u1", "ts": 10, "cell_id": "c1", "kind": "handshake"},
        {"subscriber_id": "u2", "ts": 11, "cell_id": "c2"},
    ]) + "\n"
    res = parse_xdr(text)
    assert res.records == [XdrEvent("u1", 10, "c1", "handshake"), XdrEvent("u2", 11, "c2", "data")]


def test_horizon_rejects_out_of_range():
    res = parse_xdr(HEADER + "u1,5,c1,data\nu1,50,c1,data\n", horizon=(0, 10), max_error_rate=None)
    assert len(res.records) == 1
    assert "outside observation horizon" in res.diagnostics[0].reason


def test_error_budget():
    lines = [f"u{i},{i},c1,data\n" for i in range(50)] + ["bad\n"]
    with pytest.raises(ErrorBudgetExceeded):
        parse_xdr(HEADER + "".join(lines))
    assert parse_xdr(HEADER + "".join(lines), max_error_rate=0.05).rejected == 1


def _independent_valid_count(path: Path) -> tuple[int, int]:
    pattern = re.compile(r"^[^,\s]+,-?\d+,[^,\s]+,(call|data|handshake)$")
    good = bad = 0
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            if pattern.match(line.rstrip("\n")):
                good += 1
            else:
                bad += 1
    return good, bad


def test_ten_thousand_lines_three_corrupt(tmp_path):
    rng = np.random.default_rng(3)
    lines = [f"s{int(rng.integers(0, 300)):04d},{1582848000 + i * 7},c{int(rng.integers(0, 40)):03d},data\n"
             for i in range(10_000)]
    lines[17] = "s0001,17:45,c001,data\n"
    lines[5000] = "s0002,1582848000,c001\n"
    lines[9999] = "s0003,1582848000,c001,teleport\n"
    path = tmp_path / "events.csv"
    path.write_text(HEADER + "".join(lines), encoding="utf-8")
    good, bad = _independent_valid_count(path)
    assert (good, bad) == (9_997, 3)
    res = parse_xdr(path)
    assert (len(res.records), res.rejected) == (good, bad)
    assert [d.line for d in res.diagnostics] == [19, 5002, 10001]
    table, diags, total = read_event_table(path)
    assert (len(table), len(diags), total) == (good, bad, 10_000)


def test_columnar_matches_line_parser_on_dirty_fixture(tmp_path):
    body = (
        "u1,100,c1,data\n"
        "u2,x12,c2,call\n"
        "\n"
        "u3,101,c1\n"
        ",102,c1,data\n"
        "u4,103,,data\n"
        "u5,104,c3,warp\n"
        '"u,6",105,c2,handshake\n'
        "u1,106,c2,\n"
        "u7,99999,c2,data\n"
    )
    path = tmp_path / "e.csv"
    path.write_text(HEADER + body, encoding="utf-8")
    ref = parse_xdr(path, horizon=(0, 1000), max_error_rate=None)
    table, diags, total = read_event_table(path, horizon=(0, 1000), max_error_rate=None)
    assert list(table.events()) == ref.records
    assert [str(d) for d in diags] == [str(d) for d in ref.diagnostics]
    assert total == ref.total


_ids = st.text(alphabet="abcxyz019", min_size=0, max_size=3)
_ts = st.one_of(st.integers(-5, 2000).map(str), st.sampled_from(["", "1e3", "abc", "12.5"]))
_kind = st.sampled_from(["", "data", "CALL", "handshake", "sms"])
_row = st.one_of(
    st.tuples(_ids, _ts, _ids, _kind).map(lambda t: ",".join(t)),
    st.sampled_from(["", "only,three,fields", "a,1,b,data,extra"]),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(_row, max_size=25))
def test_columnar_reader_equals_line_parser(rows):
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "e.csv"
        path.write_text(HEADER + "".join(r + "\n" for r in rows), encoding="utf-8")
        ref = parse_xdr(path, horizon=(0, 1500), max_error_rate=None)
        table, diags, total = read_event_table(path, horizon=(0, 1500), max_error_rate=None)
    assert total == ref.total == len(rows)
    assert list(table.events()) == ref.records
    assert [str(x) for x in diags] == [str(x) for x in ref.diagnostics]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["u1", "u2", "ü3"]), st.integers(0, 10**10),
                          st.sampled_from(["c1", "c2"]), st.sampled_from(["call", "data", "handshake"])), max_size=20),
       st.sampled_from(["csv", "ndjson"]))
def test_round_trip(rows, fmt):
    events = [XdrEvent(*r) for r in rows]
    text = "".join(format_xdr(events, fmt))
    if not text:  # an empty NDJSON stream
        assert events == []
        return
    assert parse_xdr(text, fmt=fmt).records == events


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["b", "a", "c"]), st.integers(0, 100), st.sampled_from(["z", "y"])), max_size=15))
def test_event_table_round_trip(rows):
    events = [XdrEvent(s, t, c, "data") for s, t, c in rows]
    table = EventTable.from_events(events)
    assert list(table.events()) == events
    assert list(table.sub_ids) == sorted(set(table.sub_ids))


def test_event_table_save_load(tmp_path):
    table = EventTable.from_events([XdrEvent("u2", 5, "c1", "call"), XdrEvent("u1", 6, "c2", "data")])
    table.save(tmp_path / "t.npz")
    back = EventTable.load(tmp_path / "t.npz")
    assert list(back.events()) == list(table.events())


def test_rename_keeps_vocabulary_sorted():
    table = EventTable.from_events([XdrEvent("a", 1, "c", "data"), XdrEvent("b", 2, "c", "data")])
    renamed = table.rename_subscribers({"a": "z", "b": "y"}.__getitem__)
    assert list(renamed.sub_ids) == ["y", "z"]
    assert [e.subscriber_id for e in renamed.events()] == ["z", "y"]


# reference tables


def test_registry_two_cells():
    reg = parse_cell_registry("cell_id,province,district,lat,lon\nc1,Edirne,Merkez,41.6,26.5\nc2,Ankara,,39.9,32.8\n")
    assert len(reg) == 2
    assert reg["c1"].district == "Merkez" and reg["c2"].district is None


def test_registry_duplicate_is_fatal():
    with pytest.raises(IngestError, match="c1"):
        parse_cell_registry("cell_id,province,district,lat,lon\nc1,Edirne,,41.6,26.5\nc1,Ankara,,39.9,32.8\n")


def test_registry_rejects_bad_coordinates():
    with pytest.raises(IngestError):
        parse_cell_registry("cell_id,province,district,lat,lon\nc1,Edirne,,95,26.5\n")


def test_duplicate_subscriber_is_fatal():
    with pytest.raises(IngestError, match="s1"):
        parse_subscribers("subscriber_id,nationality\ns1,SYR\ns1,GRC\n")


def test_nationality_normalised():
    assert parse_subscribers("subscriber_id,nationality\ns1, syr\n")["s1"].nationality == "SYR"


def test_visa_policy_reproduces_classes():
    policy = parse_visa_policy("nationality,class\nSYR,Visa\nAFG,Visa\nIRQ,Visa\nGRC,NoVisa\nBGR,NoVisa\nMDA,NoVisa\n")
    assert policy["SYR"] is MobilityClass.VISA
    assert policy["GRC"] is MobilityClass.NO_VISA
    assert {k for k, v in policy.items() if v is MobilityClass.VISA} == {"SYR", "AFG", "IRQ"}


def test_policy_unknown_value_is_fatal():
    with pytest.raises(IngestError, match="Maybe"):
        parse_visa_policy("nationality,class\nSYR,Maybe\n")
    with pytest.raises(IngestError):
        parse_language_policy("lang,group\ntr,Unassigned\n")


def test_language_and_destination_policies():
    lp = parse_language_policy("lang,group\ntr,Turkish\nEN,NoVisa\nar,Visa\n")
    assert lp == {"tr": LanguageGroup.TURKISH, "en": LanguageGroup.NO_VISA, "ar": LanguageGroup.VISA}
    dp = parse_destination_policy("country,dest\nTUR,Turkey\ndeu,Europe\nUSA,Other\n")
    assert dp["DEU"] is Destination.EUROPE


def test_parse_reference_tables_bundle(tmp_path):
    (tmp_path / "cells.csv").write_text("cell_id,province,district,lat,lon\nc1,Edirne,,41.6,26.5\n")
    (tmp_path / "subs.csv").write_text("subscriber_id,nationality\ns1,SYR\n")
    (tmp_path / "visa.csv").write_text("nationality,class\nSYR,Visa\n")
    refs = parse_reference_tables(tmp_path / "cells.csv", tmp_path / "subs.csv", tmp_path / "visa.csv")
    assert list(refs.registry) == ["c1"] and refs.visa == {"SYR": MobilityClass.VISA}


# tweets


def test_tweet_basic():
    res = parse_tweets('{"id":"t1","user":"u1","ts":1583020800,"lat":41.67,"lon":26.56,"lang":"tr"}\n')
    (t,) = res.records
    assert t.lang == "tr" and t.has_coords and t.text is None


def test_tweet_und_accepted():
    res = parse_tweets('{"id":"t1","user":"u1","ts":1,"country":"tur","lang":"und"}\n')
    assert res.records[0].lang == "und" and res.records[0].country == "TUR"


def test_tweet_missing_lang_rejected():
    res = parse_tweets('{"id":"t1","user":"u1","ts":1}\n', max_error_rate=None)
    assert res.records == [] and res.diagnostics[0].field == "lang"


def test_tweet_without_location_kept():
    res = parse_tweets('{"id":"t1","user":"u1","ts":1,"lang":"en","text":"hi"}\n')
    assert not res.records[0].has_location


def test_tweet_round_trip():
    src = (
        '{"id":"t1","user":"u1","ts":5,"lat":41.0,"lon":27.0,"country":"TUR","lang":"tr","text":"merhaba"}\n'
        '{"id":"t2","user":"u2","ts":6,"lang":"und"}\n'
    )
    first = parse_tweets(src).records
    assert parse_tweets("".join(format_tweets(first))).records == first


def test_lang_normalisation():
    assert normalize_lang("en-GB") == "en" and normalize_lang(" PT_br ") == "pt"


def test_hashtag_predicate():
    assert has_hashtag("Sınır #Edirne kapısı", ["edirne"])
    assert not has_hashtag("no tags here", ["edirne"])


# referential integrity


def _events(*rows):
    return [XdrEvent(s, t, c, "data") for s, t, c in rows]


def test_validate_all_resolvable():
    reg = CellRegistry([CellSite("c1", "Edirne", None, 41, 26)])
    subs = {"u1": Subscriber("u1", "SYR")}
    assert validate_refs(_events(("u1", 1, "c1")), reg, subs).empty


def test_validate_unknown_cell_fatal():
    reg = CellRegistry([CellSite("c1", "Edirne", None, 41, 26)])
    subs = {"u1": Subscriber("u1", "SYR")}
    report = validate_refs(_events(("u1", 1, "cX")), reg, subs)
    assert report.fatal and "cX" in report.unknown_cells
    with pytest.raises(IngestError, match="cX"):
        report.raise_if_fatal()


def test_validate_unknown_subscriber_excluded():
    reg = CellRegistry([CellSite("c1", "Edirne", None, 41, 26)])
    subs = {"u1": Subscriber("u1", "SYR")}
    events = _events(*[("ghost", i, "c1") for i in range(5)], ("u1", 9, "c1"), ("u1", 10, "c1"))
    table = EventTable.from_events(events)
    report = validate_refs(table, reg, subs)
    assert not report.fatal and report.excluded_events == 5
    assert report.excluded_events == sum(e.subscriber_id not in subs for e in events)
    kept = drop_unknown_subscribers(table, subs)
    assert len(kept) == 2 and {e.subscriber_id for e in kept.events()} == {"u1"}
    assert validate_refs(events, reg, subs).unknown_subscribers == {"ghost": 5}
