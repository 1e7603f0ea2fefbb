"""Dual-polarity lexicon scoring with boosters and negators.

Every text gets a positive strength in 1..5 and a negative strength in
-5..-1; the composite is their sum. Lexicons are plain CSV files
(``token,kind,value``) with ``kind`` one of ``term``, ``booster``, ``negator``.
"""
from __future__ import annotations

import csv
import re
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

from .timeutil import DEFAULT_TZ, iso_week, local_date, parse_offset

TOKEN_RE = re.compile(r"\w+(?:['’]\w+)*")

MAX_STRENGTH = 5


class LexiconError(ValueError):
    pass


def tokenize(text: str | None) -> list[str]:
    """Lower-cased word tokens; a leading ``#`` on hashtags is dropped."""
    if not text:
        return []
    return [m.group(0).lower() for m in TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class SentimentLexicon:
    terms: Mapping[str, int]
    boosters: Mapping[str, int] = field(default_factory=dict)
    negators: frozenset[str] = frozenset()

    def __post_init__(self):
        for tok, v in self.terms.items():
            if not (2 <= abs(int(v)) <= MAX_STRENGTH):
                raise LexiconError(f"term {tok!r} strength {v} outside 2..5 in magnitude")
        for tok, v in self.boosters.items():
            if int(v) not in (-1, 1):
                raise LexiconError(f"booster {tok!r} modifier must be +1 or -1, got {v}")
        t, b, n = set(self.terms), set(self.boosters), set(self.negators)
        clash = (t & b) | (t & n) | (b & n)
        if clash:
            raise LexiconError(f"token(s) in more than one table: {sorted(clash)}")
        object.__setattr__(self, "negators", frozenset(self.negators))


def load_lexicon(source) -> SentimentLexicon:
    terms, boosters, negators = {}, {}, set()
    fh = open(source, encoding="utf-8", newline="") if not hasattr(source, "read") else source
    with fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            tok = (row.get("token") or "").strip().lower()
            kind = (row.get("kind") or "").strip()
            if not tok:
                raise LexiconError(f"line {i}: empty token")
            if tok in terms or tok in boosters or tok in negators:
                raise LexiconError(f"line {i}: duplicate token {tok!r}")
            if kind == "term":
                terms[tok] = int(row["value"])
            elif kind == "booster":
                boosters[tok] = int(row["value"])
            elif kind == "negator":
                negators.add(tok)
            else:
                raise LexiconError(f"line {i}: unknown kind {kind!r}")
    return SentimentLexicon(terms, boosters, frozenset(negators))


@dataclass(frozen=True)
class SentimentScore:
    pos: int
    neg: int

    @property
    def composite(self) -> int:
        return self.pos + self.neg


NEUTRAL = SentimentScore(1, -1)


def score_tokens(tokens: list[str], lexicon: SentimentLexicon, window: int = 1) -> SentimentScore:
    pos, neg = 1, -1
    for i, tok in enumerate(tokens):
        strength = lexicon.terms.get(tok)
        if strength is None:
            continue
        sign = 1 if strength > 0 else -1
        magnitude = abs(strength)
        # modifiers in the preceding window, never reaching past another term
        for j in range(i - 1, max(i - window, 0) - 1, -1):
            prev = tokens[j]
            if prev in lexicon.terms:
                break
            if prev in lexicon.boosters:
                magnitude += lexicon.boosters[prev]
            elif prev in lexicon.negators:
                sign = -sign
        magnitude = min(max(magnitude, 1), MAX_STRENGTH)
        if sign > 0:
            pos = max(pos, magnitude)
        else:
            neg = min(neg, -magnitude)
    return SentimentScore(pos, neg)


def score_text(text: str | None, lexicon: SentimentLexicon, window: int = 1) -> SentimentScore:
    return score_tokens(tokenize(text), lexicon, window)


@dataclass(frozen=True)
class BucketStats:
    n: int
    total: int
    total_sq: int

    @property
    def mean(self) -> Fraction:
        return Fraction(self.total, self.n)

    @property
    def variance(self) -> Fraction:
        """Population variance."""
        m = self.mean
        return Fraction(self.total_sq, self.n) - m * m


def aggregate_scores(
    scored: Iterable[tuple[str, int, int]],
    granularity: str = "weekly",
    *,
    tz: str | int = DEFAULT_TZ,
) -> dict[tuple[str, str], BucketStats]:
    """Mean and variance of composite scores per (language, day or ISO week).

    ``scored`` yields ``(language, ts, composite)``. Sums are kept as exact
    integers so results do not depend on input order.
    """
    if granularity not in ("daily", "weekly"):
        raise ValueError(f"unknown granularity {granularity!r}")
    offset = parse_offset(tz)
    acc: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0, 0])
    for lang, ts, composite in scored:
        d = local_date(ts, offset)
        bucket = d.isoformat() if granularity == "daily" else iso_week(d)
        a = acc[(lang, bucket)]
        a[0] += 1
        a[1] += composite
        a[2] += composite * composite
    return {k: BucketStats(*v) for k, v in sorted(acc.items())}


@dataclass(frozen=True)
class ExtremeStats:
    words: int
    extreme: int

    @property
    def fraction(self) -> float:
        return self.extreme / self.words if self.words else 0.0

    @property
    def percent(self) -> str:
        """Share of extreme terms as a percentage with four significant digits."""
        return f"{_sig4(100 * self.fraction)}%"


def _sig4(x: float) -> str:
    if x == 0:
        return "0"
    from decimal import Decimal

    d = Decimal(repr(x))
    digits = 4 - d.adjusted() - 1
    return f"{x:.{max(digits, 0)}f}"


def extreme_word_stats(
    corpus: Mapping[str, Iterable[str]],
    lexicons: Mapping[str, SentimentLexicon] | SentimentLexicon,
) -> dict[str, ExtremeStats]:
    """Per language: token count and count of maximum-strength lexicon terms."""
    out = {}
    for lang, texts in corpus.items():
        lex = lexicons if isinstance(lexicons, SentimentLexicon) else lexicons.get(lang)
        words = extreme = 0
        for text in texts:
            toks = tokenize(text)
            words += len(toks)
            if lex is not None:
                extreme += sum(1 for t in toks if abs(lex.terms.get(t, 0)) == MAX_STRENGTH)
        out[lang] = ExtremeStats(words, extreme)
    return out
