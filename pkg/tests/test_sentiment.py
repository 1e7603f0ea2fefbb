from __future__ import annotations

import io
from datetime import datetime, timedelta, timezone
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from border_flux.sentiment import (
    NEUTRAL,
    LexiconError,
    SentimentLexicon,
    SentimentScore,
    aggregate_scores,
    extreme_word_stats,
    load_lexicon,
    score_text,
    score_tokens,
    tokenize,
)

TZ3 = timezone(timedelta(hours=3))
LEX = SentimentLexicon({"love": 3, "hate": -4, "awful": -5, "superb": 5}, {"very": 1, "slightly": -1}, frozenset({"not"}))


def at(y, m, d, h=12):
    return int(datetime(y, m, d, h, tzinfo=TZ3).timestamp())


@pytest.mark.parametrize("text,expect", [
    ("love", SentimentScore(3, -1)),
    ("", SentimentScore(1, -1)),
    ("very hate", SentimentScore(1, -5)),
    ("not hate", SentimentScore(4, -1)),
])
def test_hand_evaluated_scores(text, expect):
    got = score_text(text, LEX)
    assert got == expect
    assert got.composite == expect.pos + expect.neg


def test_composites_of_examples():
    assert [score_text(t, LEX).composite for t in ("love", "very hate", "not hate", "")] == [2, -4, 3, 0]


def test_none_text_is_neutral():
    assert score_text(None, LEX) == NEUTRAL


def test_tokenizer_rules():
    assert tokenize("I #LOVE it, don't") == ["i", "love", "it", "don't"]
    assert score_text("#Love", LEX).pos == 3


def test_modifier_only_reaches_one_token_back():
    assert score_text("very much love", LEX) == SentimentScore(3, -1)
    assert score_text("very much love", LEX, window=2) == SentimentScore(4, -1)


def test_booster_capped_and_floored():
    assert score_text("very superb", LEX).pos == 5
    assert score_text("not very awful", LEX, window=2).pos == 5
    assert score_text("slightly love", LEX).pos == 2


def test_mixed_text_keeps_both_polarities():
    assert score_text("love but hate", LEX) == SentimentScore(3, -4)


def test_lexicon_validation():
    with pytest.raises(LexiconError):
        SentimentLexicon({"x": 7})
    with pytest.raises(LexiconError):
        SentimentLexicon({"x": 2}, {"x": 1})
    with pytest.raises(LexiconError):
        SentimentLexicon({"x": 2}, {"y": 2})


def test_load_lexicon_csv():
    lex = load_lexicon(io.StringIO("token,kind,value\nLove,term,3\nvery,booster,1\nnot,negator,\n"))
    assert lex.terms == {"love": 3} and lex.boosters == {"very": 1} and lex.negators == {"not"}
    with pytest.raises(LexiconError, match="duplicate"):
        load_lexicon(io.StringIO("token,kind,value\nx,term,3\nx,term,2\n"))
    with pytest.raises(LexiconError, match="kind"):
        load_lexicon(io.StringIO("token,kind,value\nx,emoji,3\n"))


_vocab = st.sampled_from(["love", "hate", "awful", "superb", "very", "slightly", "not", "the", "cat"])


@settings(max_examples=200, deadline=None)
@given(st.lists(_vocab, max_size=15), st.integers(1, 4))
def test_score_bounds(tokens, window):
    s = score_tokens(tokens, LEX, window)
    assert 1 <= s.pos <= 5 and -5 <= s.neg <= -1
    assert -4 <= s.composite <= 4
    assert score_tokens(list(tokens), LEX, window) == s


# aggregation


def test_single_tweet_bucket():
    out = aggregate_scores([("en", at(2020, 3, 2), 2)])
    (key, stats), = out.items()
    assert key == ("en", "2020-W10")
    assert (stats.mean, stats.variance, stats.n) == (2, 0, 1)


def test_two_tweet_bucket():
    stats = aggregate_scores([("en", at(2020, 3, 2), 2), ("en", at(2020, 3, 3), -2)])[("en", "2020-W10")]
    assert (stats.mean, stats.variance, stats.n) == (0, 4, 2)


def test_languages_are_independent():
    base = aggregate_scores([("tr", at(2020, 3, 2), 1), ("tr", at(2020, 3, 4), 2)])
    mixed = aggregate_scores([("tr", at(2020, 3, 2), 1), ("en", at(2020, 3, 3), -4), ("tr", at(2020, 3, 4), 2)])
    assert mixed[("tr", "2020-W10")] == base[("tr", "2020-W10")]
    assert mixed[("tr", "2020-W10")].mean == Fraction(3, 2)
    assert mixed[("tr", "2020-W10")].variance == Fraction(1, 4)


def test_iso_week_boundary_in_local_time():
    # Sunday 2020-03-08 22:30 UTC is Monday 2020-03-09 locally, the first day of week 11
    ts = int(datetime(2020, 3, 8, 22, 30, tzinfo=timezone.utc).timestamp())
    assert list(aggregate_scores([("en", ts, 0)])) == [("en", "2020-W11")]
    assert list(aggregate_scores([("en", ts, 0)], "daily")) == [("en", "2020-03-09")]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["en", "tr"]), st.integers(0, 40), st.integers(-4, 4)), min_size=1, max_size=60),
       st.randoms())
def test_aggregate_closed_form_and_order_free(rows, rnd):
    scored = [(lang, at(2020, 3, 1) + day * 86400, c) for lang, day, c in rows]
    out = aggregate_scores(scored)
    shuffled = list(scored)
    rnd.shuffle(shuffled)
    assert aggregate_scores(shuffled) == out
    groups: dict = {}
    for (lang, ts, c), (_, day, _) in zip(scored, rows):
        week = (datetime(2020, 3, 1, tzinfo=TZ3) + timedelta(days=day)).isocalendar()
        groups.setdefault((lang, f"{week[0]}-W{week[1]:02d}"), []).append(c)
    assert set(out) == set(groups)
    for k, vals in groups.items():
        n = len(vals)
        mean = Fraction(sum(vals), n)
        assert out[k].mean == mean
        assert out[k].variance == sum((Fraction(v) - mean) ** 2 for v in vals) / n
        assert min(vals) <= out[k].mean <= max(vals) and out[k].variance >= 0


# extreme words


def test_ten_token_fixture():
    stats = extreme_word_stats({"en": ["the cat saw an awful dog and it ran off"]}, LEX)["en"]
    assert (stats.words, stats.extreme) == (10, 1)
    assert stats.percent == "10.00%"


def test_no_extreme_terms():
    stats = extreme_word_stats({"en": ["love and hate"]}, LEX)["en"]
    assert stats.extreme == 0 and stats.percent == "0%"


def test_percent_four_significant_digits():
    stats = extreme_word_stats({"en": ["awful " + "x " * 6799]}, LEX)["en"]
    assert stats.words == 6800 and stats.percent == "0.01471%"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(_vocab, max_size=8).map(" ".join), max_size=10), st.randoms())
def test_extreme_counts_additive_and_order_free(texts, rnd):
    per_tweet = extreme_word_stats({"en": texts}, LEX)["en"]
    joined = extreme_word_stats({"en": [" ".join(texts)]}, LEX)["en"]
    shuffled = list(texts)
    rnd.shuffle(shuffled)
    assert per_tweet == joined == extreme_word_stats({"en": shuffled}, LEX)["en"]


def test_language_without_lexicon_counts_words_only():
    out = extreme_word_stats({"fa": ["awful awful"]}, {"en": LEX})
    assert (out["fa"].words, out["fa"].extreme) == (2, 0)
