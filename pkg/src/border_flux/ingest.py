"""Parsing and validation of xDR events, reference tables and tweet exports.

Two encodings are accepted for event streams: CSV with a header row, and
NDJSON with the same keys. Every data line ends up either as exactly one
record or as exactly one :class:`Diagnostic`; a file is only rejected as a
whole when the share of bad lines exceeds the error budget.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Generic, Iterable, Iterator, Mapping, Sequence, TypeVar

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("call", "data", "handshake")
XDR_COLUMNS = ("subscriber_id", "ts", "cell_id", "kind")
TWEET_KEYS = ("id", "user", "ts", "lat", "lon", "country", "lang", "text")
DEFAULT_MAX_ERROR_RATE = 0.01


class IngestError(Exception):
    """Fatal input problem: schema violation, duplicate key, blown error budget."""


class MobilityClass(str, Enum):
    VISA = "Visa"
    NO_VISA = "NoVisa"
    UNKNOWN = "Unknown"


class LanguageGroup(str, Enum):
    VISA = "Visa"
    NO_VISA = "NoVisa"
    TURKISH = "Turkish"
    UNASSIGNED = "Unassigned"


class Destination(str, Enum):
    EUROPE = "Europe"
    TURKEY = "Turkey"
    OTHER = "Other"


# ----------------------------------------------------------------------------
# records


@dataclass(frozen=True, slots=True)
class XdrEvent:
    subscriber_id: str
    ts: int
    cell_id: str
    kind: str = "data"


@dataclass(frozen=True, slots=True)
class CellSite:
    cell_id: str
    province: str
    district: str | None
    lat: float
    lon: float


@dataclass(frozen=True, slots=True)
class Subscriber:
    subscriber_id: str
    nationality: str


@dataclass(frozen=True, slots=True)
class Tweet:
    tweet_id: str
    user_id: str
    ts: int
    lang: str
    lat: float | None = None
    lon: float | None = None
    country: str | None = None
    text: str | None = None

    @property
    def has_coords(self) -> bool:
        return self.lat is not None and self.lon is not None

    @property
    def has_location(self) -> bool:
        """Geolocated analyses need coordinates or a country code."""
        return self.has_coords or self.country is not None


@dataclass(frozen=True)
class Diagnostic:
    line: int
    field: str | None
    reason: str

    def __str__(self) -> str:
        where = f"line {self.line}"
        if self.field:
            where += f" [{self.field}]"
        return f"{where}: {self.reason}"


T = TypeVar("T")


@dataclass
class ParseResult(Generic[T]):
    records: list[T]
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.records) + len(self.diagnostics)

    @property
    def rejected(self) -> int:
        return len(self.diagnostics)

    @property
    def error_rate(self) -> float:
        return self.rejected / self.total if self.total else 0.0

    def __iter__(self) -> Iterator[T]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


class ErrorBudgetExceeded(IngestError):
    def __init__(self, rejected: int, total: int, limit: float, first: Sequence[Diagnostic]):
        self.rejected, self.total, self.limit = rejected, total, limit
        self.diagnostics = list(first)
        head = "; ".join(str(d) for d in self.diagnostics[:3])
        super().__init__(
            f"{rejected} of {total} lines malformed ({rejected / total:.2%} > {limit:.2%}): {head}"
        )


def _check_budget(result: ParseResult, max_error_rate: float | None) -> None:
    if max_error_rate is not None and result.total and result.error_rate > max_error_rate:
        raise ErrorBudgetExceeded(result.rejected, result.total, max_error_rate, result.diagnostics)
    if result.rejected:
        log.warning("rejected %d of %d lines", result.rejected, result.total)


# ----------------------------------------------------------------------------
# normalisation helpers


def normalize_nationality(code: str) -> str:
    return code.strip().upper()


def normalize_country(code: str) -> str:
    return code.strip().upper()


def normalize_lang(tag: str) -> str:
    """Lower-cased primary subtag: ``"en-GB"`` -> ``"en"``."""
    return tag.strip().replace("_", "-").split("-", 1)[0].lower()


def _parse_int(raw: str) -> int:
    s = raw.strip()
    if not s or not (s.isdigit() or (s[0] == "-" and s[1:].isdigit())):
        raise ValueError(f"not an integer epoch timestamp: {raw!r}")
    return int(s)


def _lines(source) -> Iterator[str]:
    """Accept a path, an open text file, a string blob or an iterable of lines."""
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        with open(source, encoding="utf-8", newline="") as fh:
            yield from fh
    elif isinstance(source, str):
        yield from io.StringIO(source, newline="")
    else:
        yield from source


def _split_csv(line: str) -> list[str]:
    line = line.rstrip("\r\n")
    if '"' in line:
        return next(csv.reader([line]))
    return line.split(",")


# ----------------------------------------------------------------------------
# xDR events


def _xdr_from_fields(get, line_no: int, horizon: tuple[int, int] | None) -> XdrEvent | Diagnostic:
    sub = get("subscriber_id")
    cell = get("cell_id")
    raw_ts = get("ts")
    kind = get("kind")
    if sub is None or not str(sub):
        return Diagnostic(line_no, "subscriber_id", "empty subscriber_id")
    if cell is None or not str(cell):
        return Diagnostic(line_no, "cell_id", "empty cell_id")
    if raw_ts is None:
        return Diagnostic(line_no, "ts", "missing timestamp")
    try:
        ts = raw_ts if isinstance(raw_ts, int) and not isinstance(raw_ts, bool) else _parse_int(str(raw_ts))
    except ValueError as exc:
        return Diagnostic(line_no, "ts", str(exc))
    if horizon is not None and not horizon[0] <= ts <= horizon[1]:
        return Diagnostic(line_no, "ts", f"timestamp {ts} outside observation horizon")
    kind = (str(kind).strip().lower() if kind is not None else "") or "data"
    if kind not in KINDS:
        return Diagnostic(line_no, "kind", f"unknown event kind {kind!r}")
    return XdrEvent(str(sub), ts, str(cell), kind)


def sniff_format(first_line: str) -> str:
    return "ndjson" if first_line.lstrip().startswith("{") else "csv"


def iter_xdr(
    source, *, fmt: str | None = None, horizon: tuple[int, int] | None = None
) -> Iterator[XdrEvent | Diagnostic]:
    """Yield one event or one diagnostic per data line, in file order."""
    it = iter(_lines(source))
    first = next(it, None)
    if first is None:
        return
    fmt = fmt or sniff_format(first)
    if fmt == "csv":
        header = [h.strip() for h in _split_csv(first)]
        missing = [c for c in XDR_COLUMNS[:3] if c not in header]
        if missing:
            raise IngestError(f"xDR header missing column(s) {missing}: {header}")
        index = {name: i for i, name in enumerate(header)}
        width = len(header)
        for line_no, line in enumerate(it, start=2):
            if not line.strip():
                yield Diagnostic(line_no, None, "blank line")
                continue
            fields = _split_csv(line)
            if len(fields) != width:
                yield Diagnostic(line_no, None, f"expected {width} fields, got {len(fields)}")
                continue
            yield _xdr_from_fields(lambda k: fields[index[k]] if k in index else None, line_no, horizon)
    elif fmt == "ndjson":
        for line_no, line in enumerate(_chain(first, it), start=1):
            if not line.strip():
                yield Diagnostic(line_no, None, "blank line")
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                yield Diagnostic(line_no, None, f"invalid JSON: {exc.msg}")
                continue
            if not isinstance(obj, dict):
                yield Diagnostic(line_no, None, "JSON value is not an object")
                continue
            yield _xdr_from_fields(obj.get, line_no, horizon)
    else:
        raise IngestError(f"unsupported xDR encoding {fmt!r}")


def _chain(first: str, rest: Iterator[str]) -> Iterator[str]:
    yield first
    yield from rest


def parse_xdr(
    source,
    *,
    fmt: str | None = None,
    horizon: tuple[int, int] | None = None,
    max_error_rate: float | None = DEFAULT_MAX_ERROR_RATE,
) -> ParseResult[XdrEvent]:
    """Parse an xDR export into events plus per-line diagnostics.

    ``horizon`` is an inclusive ``(start, end)`` pair of epoch seconds. Raises
    :class:`ErrorBudgetExceeded` when the rejected share is above
    ``max_error_rate`` (``None`` disables the budget).
    """
    result: ParseResult[XdrEvent] = ParseResult([])
    for item in iter_xdr(source, fmt=fmt, horizon=horizon):
        if isinstance(item, Diagnostic):
            result.diagnostics.append(item)
        else:
            result.records.append(item)
    _check_budget(result, max_error_rate)
    return result


def format_xdr(events: Iterable[XdrEvent], fmt: str = "csv") -> Iterator[str]:
    """Serialise events to the canonical encoding, one line per item."""
    if fmt == "csv":
        yield ",".join(XDR_COLUMNS) + "\n"
        for e in events:
            yield f"{e.subscriber_id},{e.ts},{e.cell_id},{e.kind}\n"
    elif fmt == "ndjson":
        for e in events:
            yield json.dumps(
                {"subscriber_id": e.subscriber_id, "ts": e.ts, "cell_id": e.cell_id, "kind": e.kind},
                ensure_ascii=False,
            ) + "\n"
    else:
        raise ValueError(f"unsupported encoding {fmt!r}")


# ----------------------------------------------------------------------------
# columnar event table


@dataclass
class EventTable:
    """Events as parallel arrays with sorted string vocabularies.

    ``sub[i]`` and ``cell[i]`` index into ``sub_ids`` and ``cell_ids``.
    """

    sub: np.ndarray
    ts: np.ndarray
    cell: np.ndarray
    kind: np.ndarray
    sub_ids: np.ndarray
    cell_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ts)

    @classmethod
    def empty(cls) -> "EventTable":
        return cls(
            np.zeros(0, np.int32), np.zeros(0, np.int64), np.zeros(0, np.int32),
            np.zeros(0, np.int8), np.array([], dtype=str), np.array([], dtype=str),
        )

    @classmethod
    def from_events(cls, events: Iterable[XdrEvent]) -> "EventTable":
        events = list(events)
        if not events:
            return cls.empty()
        sub_codes, sub_ids = _encode([e.subscriber_id for e in events])
        cell_codes, cell_ids = _encode([e.cell_id for e in events])
        kind_index = {k: i for i, k in enumerate(KINDS)}
        return cls(
            sub_codes,
            np.fromiter((e.ts for e in events), np.int64, len(events)),
            cell_codes,
            np.fromiter((kind_index[e.kind] for e in events), np.int8, len(events)),
            sub_ids,
            cell_ids,
        )

    def events(self) -> Iterator[XdrEvent]:
        subs, cells = self.sub_ids.tolist(), self.cell_ids.tolist()
        for s, t, c, k in zip(self.sub.tolist(), self.ts.tolist(), self.cell.tolist(), self.kind.tolist()):
            yield XdrEvent(subs[s], t, cells[c], KINDS[k])

    def take(self, mask_or_index: np.ndarray) -> "EventTable":
        return EventTable(
            self.sub[mask_or_index], self.ts[mask_or_index], self.cell[mask_or_index],
            self.kind[mask_or_index], self.sub_ids, self.cell_ids,
        )

    def rename_subscribers(self, mapping) -> "EventTable":
        """Apply ``mapping(old_id) -> new_id`` to the vocabulary, keeping it sorted."""
        new_ids = np.array([mapping(s) for s in self.sub_ids.tolist()], dtype=str)
        if len(set(new_ids.tolist())) != len(new_ids):
            raise IngestError("subscriber renaming is not injective")
        order = np.argsort(new_ids, kind="stable")
        rank = np.empty(len(order), np.int32)
        rank[order] = np.arange(len(order), dtype=np.int32)
        return EventTable(
            rank[self.sub] if len(self.sub) else self.sub,
            self.ts, self.cell, self.kind, new_ids[order], self.cell_ids,
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh, sub=self.sub, ts=self.ts, cell=self.cell, kind=self.kind,
                sub_ids=self.sub_ids, cell_ids=self.cell_ids,
            )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EventTable":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["sub"], z["ts"], z["cell"], z["kind"], z["sub_ids"], z["cell_ids"])


def _encode(values: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    vocab, codes = np.unique(np.asarray(values, dtype=str), return_inverse=True)
    return codes.astype(np.int32).reshape(-1), vocab


def _dict_column(col) -> tuple[np.ndarray, np.ndarray]:
    """Indices and vocabulary of a dictionary-typed chunked column with unified dictionaries."""
    chunks = col.chunks
    if not chunks:
        return np.zeros(0, np.int32), np.array([], dtype=str)
    vocab = np.asarray(chunks[0].dictionary.to_pylist(), dtype=str)
    idx = np.concatenate([c.indices.to_numpy(zero_copy_only=False) for c in chunks]).astype(np.int32, copy=False)
    return idx, vocab


def _raw_lines(path, wanted: set[int]) -> dict[int, str]:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for n, line in enumerate(fh, start=1):
            if n in wanted:
                out[n] = line
                if len(out) == len(wanted):
                    break
    return out


def _sorted_vocabulary(codes: np.ndarray, vocab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Re-encode ``codes`` against the sorted vocabulary of values actually used."""
    used = np.zeros(len(vocab), dtype=bool)
    used[codes] = True
    kept = np.flatnonzero(used)
    order = kept[np.argsort(vocab[kept], kind="stable")]
    rank = np.full(len(vocab), -1, np.int32)
    rank[order] = np.arange(len(order), dtype=np.int32)
    return rank[codes], vocab[order]


def read_event_table(
    path: str | os.PathLike,
    *,
    horizon: tuple[int, int] | None = None,
    max_error_rate: float | None = DEFAULT_MAX_ERROR_RATE,
) -> tuple[EventTable, list[Diagnostic], int]:
    """Columnar fast path for large CSV exports.

    Returns ``(table, diagnostics, total_lines)`` with the same acceptance
    rules as :func:`parse_xdr`. NDJSON input falls back to the line parser.
    """
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first:
        return EventTable.empty(), [], 0
    if sniff_format(first) == "ndjson":
        res = parse_xdr(path, fmt="ndjson", horizon=horizon, max_error_rate=max_error_rate)
        return EventTable.from_events(res.records), res.diagnostics, res.total

    import pyarrow as pa
    import pyarrow.compute as pc
    import pyarrow.csv as pacsv

    header = [h.strip() for h in _split_csv(first)]
    missing = [c for c in XDR_COLUMNS[:3] if c not in header]
    if missing:
        raise IngestError(f"xDR header missing column(s) {missing}: {header}")

    bad: list[Diagnostic] = []

    def on_invalid(row) -> str:
        reason = f"expected {row.expected_columns} fields, got {row.actual_columns}"
        bad.append(Diagnostic(row.number, None, reason))
        return "skip"

    # identifiers come back dictionary-encoded, so ten million rows cost a few
    # int32 arrays instead of ten million Python-visible strings
    dict_type = pa.dictionary(pa.int32(), pa.string())
    table = pacsv.read_csv(
        path,
        read_options=pacsv.ReadOptions(use_threads=False, block_size=1 << 24),
        parse_options=pacsv.ParseOptions(invalid_row_handler=on_invalid, ignore_empty_lines=False),
        convert_options=pacsv.ConvertOptions(
            column_types={c: (pa.string() if c == "ts" else dict_type) for c in header},
            include_columns=[c for c in XDR_COLUMNS if c in header],
            strings_can_be_null=False,
        ),
    ).unify_dictionaries()
    n_valid = table.num_rows
    total = n_valid + len(bad)
    if bad:
        bad_lines = np.array(sorted(d.line for d in bad), dtype=np.int64)
        line_of = np.setdiff1d(np.arange(2, total + 2, dtype=np.int64), bad_lines, assume_unique=True)
    else:
        line_of = None

    sub, sub_vocab = _dict_column(table.column("subscriber_id"))
    cell, cell_vocab = _dict_column(table.column("cell_id"))
    ts_raw = table.column("ts").combine_chunks()
    kind, kind_vocab = _dict_column(table.column("kind")) if "kind" in header else (None, None)
    del table

    reasons: list[tuple[np.ndarray, str, str]] = []
    ok = np.ones(n_valid, dtype=bool)

    ts_ok = pc.match_substring_regex(ts_raw, r"^-?[0-9]{1,18}$").to_numpy(zero_copy_only=False)
    ts_vals = np.zeros(n_valid, dtype=np.int64)
    if ts_ok.any():
        ts_vals[ts_ok] = pc.cast(pc.filter(ts_raw, pa.array(ts_ok)), pa.int64()).to_numpy()

    sub_empty = (np.char.str_len(sub_vocab) == 0)[sub] if n_valid else np.zeros(0, bool)
    cell_empty = (np.char.str_len(cell_vocab) == 0)[cell] if n_valid else np.zeros(0, bool)
    blank = sub_empty & cell_empty & ~ts_ok
    if kind is not None:
        norm = [k.strip().lower() or "data" for k in kind_vocab.tolist()]
        vocab_code = np.array([KINDS.index(k) if k in KINDS else -1 for k in norm], dtype=np.int8)
        kind_codes = vocab_code[kind] if n_valid else np.zeros(0, np.int8)
        kind_bad = kind_codes < 0
        kind_codes = np.where(kind_bad, 0, kind_codes).astype(np.int8)
        if blank.any():
            blank &= (np.char.str_len(kind_vocab) == 0)[kind]
    else:
        kind_codes = np.ones(n_valid, dtype=np.int8)
        kind_bad = np.zeros(n_valid, dtype=bool)

    if blank.any():
        # arrow reads an empty line and ",,," alike; look at the raw text
        rows_b = np.flatnonzero(blank)
        lines_b = line_of[rows_b] if line_of is not None else rows_b + 2
        raw = _raw_lines(path, set(lines_b.tolist()))
        blank[rows_b] = [not raw[int(n)].strip() for n in lines_b]

    # first failing field wins, mirroring the line parser's check order
    checks = [
        (blank, None, "blank line"),
        (sub_empty, "subscriber_id", "empty subscriber_id"),
        (cell_empty, "cell_id", "empty cell_id"),
        (~ts_ok, "ts", "not an integer epoch timestamp"),
    ]
    if horizon is not None:
        checks.append((ts_ok & ((ts_vals < horizon[0]) | (ts_vals > horizon[1])), "ts", "outside observation horizon"))
    checks.append((kind_bad, "kind", "unknown event kind"))
    for mask, fld, reason in checks:
        hit = mask & ok
        if hit.any():
            reasons.append((np.flatnonzero(hit), fld, reason))
            ok &= ~hit

    if reasons:
        for rows, fld, reason in reasons:
            for r in rows.tolist():
                line = int(line_of[r]) if line_of is not None else r + 2
                if fld == "ts" and reason.startswith("not"):
                    reason_r = f"{reason}: {ts_raw[r].as_py()!r}"
                elif fld == "ts":
                    reason_r = f"timestamp {int(ts_vals[r])} {reason}"
                elif fld == "kind":
                    reason_r = f"{reason} {str(kind_vocab[kind[r]]).strip().lower()!r}"
                else:
                    reason_r = reason
                bad.append(Diagnostic(line, fld, reason_r))
        bad.sort(key=lambda d: d.line)
        sub = sub[ok]
        cell = cell[ok]
        ts_vals = ts_vals[ok]
        kind_codes = kind_codes[ok]
    else:
        bad.sort(key=lambda d: d.line)

    del ts_raw
    if total and max_error_rate is not None and len(bad) / total > max_error_rate:
        raise ErrorBudgetExceeded(len(bad), total, max_error_rate, bad)
    if bad:
        log.warning("rejected %d of %d lines", len(bad), total)

    sub_codes, sub_ids = _sorted_vocabulary(sub, sub_vocab)
    del sub
    cell_codes, cell_ids = _sorted_vocabulary(cell, cell_vocab)
    del cell
    return EventTable(sub_codes, ts_vals, cell_codes, kind_codes, sub_ids, cell_ids), bad, total


# ----------------------------------------------------------------------------
# reference tables


class CellRegistry(Mapping[str, CellSite]):
    def __init__(self, sites: Iterable[CellSite] = ()):
        self._sites: dict[str, CellSite] = {}
        for s in sites:
            if s.cell_id in self._sites:
                raise IngestError(f"duplicate cell_id {s.cell_id!r} in registry")
            self._sites[s.cell_id] = s

    def __getitem__(self, key: str) -> CellSite:
        return self._sites[key]

    def __iter__(self):
        return iter(self._sites)

    def __len__(self) -> int:
        return len(self._sites)

    def area_of(self, cell_id: str, level: str = "province") -> str:
        site = self._sites[cell_id]
        if level == "province":
            return site.province
        if level == "district":
            return site.district or site.province
        raise ValueError(f"unknown spatial level {level!r}")

    def area_lookup(self, cell_ids: Sequence[str], level: str = "province") -> tuple[np.ndarray, list[str]]:
        """Map an array of cell ids to codes into a sorted area vocabulary.

        Unknown cells map to -1.
        """
        areas = sorted({self.area_of(c, level) for c in self._sites})
        index = {a: i for i, a in enumerate(areas)}
        codes = np.array(
            [index[self.area_of(c, level)] if c in self._sites else -1 for c in cell_ids],
            dtype=np.int32,
        )
        return codes, areas


def _csv_rows(source, required: Sequence[str], what: str) -> Iterator[tuple[int, dict[str, str]]]:
    reader = csv.DictReader(_lines(source))
    fields = [f.strip() for f in (reader.fieldnames or [])]
    reader.fieldnames = fields
    missing = [c for c in required if c not in fields]
    if missing:
        raise IngestError(f"{what}: header missing column(s) {missing}")
    for i, row in enumerate(reader, start=2):
        if None in row or any(row.get(c) is None for c in required):
            raise IngestError(f"{what}: line {i} has the wrong number of fields")
        yield i, row


def parse_cell_registry(source) -> CellRegistry:
    sites = []
    for i, row in _csv_rows(source, ("cell_id", "province", "lat", "lon"), "cell registry"):
        try:
            lat, lon = float(row["lat"]), float(row["lon"])
        except ValueError:
            raise IngestError(f"cell registry: line {i}: non-numeric coordinates") from None
        if not (-90 <= lat <= 90 and -180 <= lon <= 180) or math.isnan(lat) or math.isnan(lon):
            raise IngestError(f"cell registry: line {i}: coordinates out of range ({lat}, {lon})")
        cid = row["cell_id"].strip()
        prov = row["province"].strip()
        if not cid or not prov:
            raise IngestError(f"cell registry: line {i}: empty cell_id or province")
        sites.append(CellSite(cid, prov, (row.get("district") or "").strip() or None, lat, lon))
    return CellRegistry(sites)


def parse_subscribers(source) -> dict[str, Subscriber]:
    out: dict[str, Subscriber] = {}
    for i, row in _csv_rows(source, ("subscriber_id", "nationality"), "subscriber table"):
        sid = row["subscriber_id"].strip()
        if not sid:
            raise IngestError(f"subscriber table: line {i}: empty subscriber_id")
        if sid in out:
            raise IngestError(f"duplicate subscriber_id {sid!r} in subscriber table")
        out[sid] = Subscriber(sid, normalize_nationality(row["nationality"]))
    return out


def _parse_policy(source, key: str, value: str, enum: type[Enum], norm, what: str) -> dict:
    allowed = {e.value: e for e in enum if e.value not in ("Unknown", "Unassigned")}
    out = {}
    for i, row in _csv_rows(source, (key, value), what):
        k = norm(row[key])
        v = row[value].strip()
        if v not in allowed:
            raise IngestError(f"{what}: line {i}: unknown value {v!r} (allowed: {sorted(allowed)})")
        if k in out:
            raise IngestError(f"{what}: duplicate key {k!r}")
        out[k] = allowed[v]
    return out


def parse_visa_policy(source) -> dict[str, MobilityClass]:
    return _parse_policy(source, "nationality", "class", MobilityClass, normalize_nationality, "visa policy")


def parse_language_policy(source) -> dict[str, LanguageGroup]:
    return _parse_policy(source, "lang", "group", LanguageGroup, normalize_lang, "language policy")


def parse_destination_policy(source) -> dict[str, Destination]:
    return _parse_policy(source, "country", "dest", Destination, normalize_country, "destination policy")


@dataclass
class ReferenceTables:
    registry: CellRegistry
    subscribers: dict[str, Subscriber]
    visa: dict[str, MobilityClass]
    languages: dict[str, LanguageGroup] = field(default_factory=dict)
    destinations: dict[str, Destination] = field(default_factory=dict)


def parse_reference_tables(cells, subscribers, visa_policy, language_policy=None, destination_policy=None) -> ReferenceTables:
    return ReferenceTables(
        parse_cell_registry(cells),
        parse_subscribers(subscribers),
        parse_visa_policy(visa_policy),
        parse_language_policy(language_policy) if language_policy is not None else {},
        parse_destination_policy(destination_policy) if destination_policy is not None else {},
    )


# ----------------------------------------------------------------------------
# tweets


def _opt_float(obj: dict, key: str) -> float | None:
    v = obj.get(key)
    if v is None or v == "":
        return None
    if isinstance(v, bool):
        raise ValueError(f"{key} is not numeric")
    return float(v)


def _tweet_from_obj(obj: dict, line_no: int) -> Tweet | Diagnostic:
    for key in ("id", "user"):
        if obj.get(key) in (None, ""):
            return Diagnostic(line_no, key, f"missing {key}")
    lang = obj.get("lang")
    if not isinstance(lang, str) or not lang.strip():
        return Diagnostic(line_no, "lang", "missing lang")
    raw_ts = obj.get("ts")
    try:
        if isinstance(raw_ts, bool) or raw_ts is None:
            raise ValueError(f"not an integer epoch timestamp: {raw_ts!r}")
        ts = raw_ts if isinstance(raw_ts, int) else _parse_int(str(raw_ts))
    except ValueError as exc:
        return Diagnostic(line_no, "ts", str(exc))
    try:
        lat, lon = _opt_float(obj, "lat"), _opt_float(obj, "lon")
    except (TypeError, ValueError):
        return Diagnostic(line_no, "lat", "non-numeric coordinates")
    if (lat is None) != (lon is None):
        return Diagnostic(line_no, "lat", "lat and lon must be given together")
    if lat is not None and not (-90 <= lat <= 90 and -180 <= lon <= 180):
        return Diagnostic(line_no, "lat", f"coordinates out of range ({lat}, {lon})")
    country = obj.get("country")
    country = normalize_country(country) if isinstance(country, str) and country.strip() else None
    text = obj.get("text")
    return Tweet(
        str(obj["id"]), str(obj["user"]), ts, normalize_lang(lang), lat, lon, country,
        text if isinstance(text, str) else None,
    )


def parse_tweets(source, *, max_error_rate: float | None = DEFAULT_MAX_ERROR_RATE) -> ParseResult[Tweet]:
    """Parse a tweet NDJSON export. Tweets without location are kept."""
    result: ParseResult[Tweet] = ParseResult([])
    for line_no, line in enumerate(_lines(source), start=1):
        if not line.strip():
            result.diagnostics.append(Diagnostic(line_no, None, "blank line"))
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            result.diagnostics.append(Diagnostic(line_no, None, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            result.diagnostics.append(Diagnostic(line_no, None, "JSON value is not an object"))
            continue
        item = _tweet_from_obj(obj, line_no)
        (result.diagnostics if isinstance(item, Diagnostic) else result.records).append(item)
    _check_budget(result, max_error_rate)
    return result


def format_tweets(tweets: Iterable[Tweet]) -> Iterator[str]:
    for t in tweets:
        obj = {"id": t.tweet_id, "user": t.user_id, "ts": t.ts}
        if t.has_coords:
            obj["lat"], obj["lon"] = t.lat, t.lon
        if t.country is not None:
            obj["country"] = t.country
        obj["lang"] = t.lang
        if t.text is not None:
            obj["text"] = t.text
        yield json.dumps(obj, ensure_ascii=False) + "\n"


DEFAULT_HASHTAGS = (
    "IStandWithGreece", "Yunanistan", "suriye", "suriyeli", "multeci", "refugees",
    "refugeecrisis", "syrianrefugees", "RefugeesWelcome", "göçmenorumu", "avrupabirliği",
    "HumanRightsRefugee", "suriyelileriistemiyoruz", "negülüyorsunerdoğan",
    "SenGülkiÜlkenGülsünReis", "Greekborder", "GreeceAttacksRefugees", "GreeceUnderAttack2",
    "sınırKapıları", "ipsaldı", "turkishborder", "kapılaracıldı",
)


def has_hashtag(text: str | None, hashtags: Iterable[str] = DEFAULT_HASHTAGS) -> bool:
    """True when ``text`` carries any of ``hashtags`` (case-insensitive)."""
    if not text:
        return False
    import re

    wanted = {h.lstrip("#").casefold() for h in hashtags}
    return any(tag.casefold() in wanted for tag in re.findall(r"#(\w+)", text))


# ----------------------------------------------------------------------------
# referential integrity


@dataclass
class ValidationReport:
    unknown_cells: dict[str, int] = field(default_factory=dict)
    unknown_subscribers: dict[str, int] = field(default_factory=dict)

    @property
    def fatal(self) -> bool:
        return bool(self.unknown_cells)

    @property
    def excluded_events(self) -> int:
        return sum(self.unknown_subscribers.values())

    @property
    def empty(self) -> bool:
        return not self.unknown_cells and not self.unknown_subscribers

    def raise_if_fatal(self) -> None:
        if self.fatal:
            names = ", ".join(sorted(self.unknown_cells)[:10])
            raise IngestError(f"{len(self.unknown_cells)} cell id(s) missing from registry: {names}")


def validate_refs(events, registry: Mapping[str, CellSite], subscribers: Mapping[str, Subscriber]) -> ValidationReport:
    """Cross-check event ids against the registry and subscriber table."""
    report = ValidationReport()
    if isinstance(events, EventTable):
        cell_n = np.bincount(events.cell, minlength=len(events.cell_ids))
        for cid, n in zip(events.cell_ids.tolist(), cell_n.tolist()):
            if n and cid not in registry:
                report.unknown_cells[cid] = n
        sub_n = np.bincount(events.sub, minlength=len(events.sub_ids))
        for sid, n in zip(events.sub_ids.tolist(), sub_n.tolist()):
            if n and sid not in subscribers:
                report.unknown_subscribers[sid] = n
    else:
        cells: Counter[str] = Counter()
        subs: Counter[str] = Counter()
        for e in events:
            if e.cell_id not in registry:
                cells[e.cell_id] += 1
            if e.subscriber_id not in subscribers:
                subs[e.subscriber_id] += 1
        report.unknown_cells = dict(cells)
        report.unknown_subscribers = dict(subs)
    if report.unknown_subscribers:
        log.warning(
            "%d events from %d unregistered subscriber(s) excluded",
            report.excluded_events, len(report.unknown_subscribers),
        )
    return report


def drop_unknown_subscribers(table: EventTable, subscribers: Mapping[str, Subscriber]) -> EventTable:
    known = np.array([s in subscribers for s in table.sub_ids.tolist()], dtype=bool)
    if known.all():
        return table
    return table.take(known[table.sub])
