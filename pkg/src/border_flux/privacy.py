"""Pseudonymisation, small-cell suppression and the aggregate-only query service.

Published tables never contain a count between 1 and ``k - 1``: such cells are
replaced by the marker ``"<k"``. Zero cells are kept since they reveal no
individual. Queries are answered only from already-published files, through a
fixed set of templates; there is no template that returns an individual record.
"""
from __future__ import annotations

import csv
import hashlib
import hmac
import io
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Hashable, Mapping

log = logging.getLogger(__name__)

MOBILE_KEY_ENV = "BORDER_FLUX_MOBILE_KEY"
SOCIAL_KEY_ENV = "BORDER_FLUX_SOCIAL_KEY"
SPATIAL_LEVELS = ("province", "district")


class PrivacyError(Exception):
    pass


@dataclass(frozen=True)
class PrivacyPolicy:
    k: int = 10
    spatial_floor: str = "province"
    pseudonym_key: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.spatial_floor not in SPATIAL_LEVELS:
            raise ValueError(f"spatial_floor must be one of {SPATIAL_LEVELS}")

    @property
    def marker(self) -> str:
        return f"<{self.k}"

    def metadata(self) -> dict:
        return {"k": self.k, "spatial_floor": self.spatial_floor}


# ----------------------------------------------------------------------------
# pseudonyms


def load_key(env_var: str = MOBILE_KEY_ENV, environ: Mapping[str, str] | None = None) -> bytes:
    value = (environ if environ is not None else os.environ).get(env_var)
    if not value:
        raise PrivacyError(f"pseudonymisation key missing: set {env_var}")
    return value.encode("utf-8")


def pseudonymize(raw_id: str, key: bytes) -> str:
    """Keyed HMAC-SHA256 token, 32 lowercase hex characters."""
    if not key:
        raise PrivacyError("empty pseudonymisation key")
    return hmac.new(key, raw_id.encode("utf-8"), hashlib.sha256).hexdigest()[:32]


# ----------------------------------------------------------------------------
# suppression


@dataclass
class SuppressedCounts:
    cells: dict[Hashable, int | str]
    published_total: int
    partial: bool


def suppress(table: Mapping[Hashable, int], policy: PrivacyPolicy | int) -> SuppressedCounts:
    """Replace every cell in ``(0, k)`` by the marker; totals cover published cells only."""
    k = policy if isinstance(policy, int) else policy.k
    marker = f"<{k}"
    cells: dict[Hashable, int | str] = {}
    total, partial = 0, False
    for key, n in table.items():
        if n < 0:
            raise ValueError(f"negative count at {key!r}")
        if 0 < n < k:
            cells[key] = marker
            partial = True
        else:
            cells[key] = n
            total += n
    return SuppressedCounts(cells, total, partial)


@dataclass
class Table:
    """A published table: rows of plain values plus its suppression rules.

    ``count_columns`` are suppressed cell by cell. When a column listed in
    ``row_guard`` is suppressed, every column in ``dependent_columns`` of that
    row is suppressed too (a mean over fewer than ``k`` people is as revealing
    as the count).
    """

    name: str
    columns: list[str]
    rows: list[list[Any]]
    count_columns: tuple[str, ...] = ()
    row_guard: tuple[str, ...] = ()
    dependent_columns: tuple[str, ...] = ()

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]


def suppress_table(table: Table, policy: PrivacyPolicy | int) -> Table:
    k = policy if isinstance(policy, int) else policy.k
    marker = f"<{k}"
    idx = {c: i for i, c in enumerate(table.columns)}
    counts = [idx[c] for c in table.count_columns]
    guards = [idx[c] for c in table.row_guard]
    deps = [idx[c] for c in table.dependent_columns]
    rows = []
    for row in table.rows:
        row = list(row)
        guard_hit = any(isinstance(row[i], int) and 0 < row[i] < k for i in guards)
        for i in counts:
            if isinstance(row[i], int) and not isinstance(row[i], bool) and 0 < row[i] < k:
                row[i] = marker
        if guard_hit:
            for i in deps:
                row[i] = marker
        rows.append(row)
    return Table(table.name, list(table.columns), rows, table.count_columns, table.row_guard, table.dependent_columns)


# ----------------------------------------------------------------------------
# serialisation of published files


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_to_csv(table: Table) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue().encode("utf-8")


def parse_value(s: str) -> Any:
    if s.lstrip("-").isdigit():
        return int(s)
    try:
        if any(c in s for c in ".eE") and not s.startswith("<"):
            return float(s)
    except ValueError:
        pass
    return s


def csv_to_records(data: bytes | str) -> list[dict]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    return [{k: parse_value(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=1) + "\n").encode("utf-8")


# ----------------------------------------------------------------------------
# scanning


FORBIDDEN_COLUMNS = frozenset({"subscriber_id", "user_id", "user", "id", "lat", "lon"})
NON_COUNT_FIELDS = frozenset({"k", "bucket_start", "iso_week", "date", "year"})
# Sankey node ids are area@date labels, not personal identifiers
_SANKEY_NODE = re.compile(r"\$\.nodes\[\d+\]\.id")


@dataclass(frozen=True)
class Violation:
    file: str
    where: str
    value: Any

    def __str__(self) -> str:
        return f"{self.file}: {self.where}: {self.value!r}"


def _scan_json(obj: Any, k: int, path: str, out: list, fname: str) -> None:
    if isinstance(obj, dict):
        for key, v in obj.items():
            if key in FORBIDDEN_COLUMNS and not _SANKEY_NODE.fullmatch(f"{path}.{key}"):
                out.append(Violation(fname, f"{path}.{key}", "identifier field"))
            elif key not in NON_COUNT_FIELDS:
                _scan_json(v, k, f"{path}.{key}", out, fname)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _scan_json(v, k, f"{path}[{i}]", out, fname)
    elif isinstance(obj, int) and not isinstance(obj, bool) and 0 < obj < k:
        out.append(Violation(fname, path, obj))


def scan_file(path: str | os.PathLike, k: int) -> list[Violation]:
    """Integer cells in ``(0, k)`` and identifier columns in one published file."""
    path = Path(path)
    out: list[Violation] = []
    data = path.read_bytes()
    if path.suffix == ".json":
        _scan_json(json.loads(data), k, "$", out, path.name)
    elif path.suffix == ".csv":
        text = data.decode("utf-8")
        reader = csv.reader(io.StringIO(text))
        header = next(reader, [])
        for col in header:
            if col in FORBIDDEN_COLUMNS:
                out.append(Violation(path.name, f"column {col}", "identifier column"))
        for line, row in enumerate(reader, start=2):
            for col, cell in zip(header, row):
                if col in NON_COUNT_FIELDS:
                    continue
                v = parse_value(cell)
                if isinstance(v, int) and 0 < v < k:
                    out.append(Violation(path.name, f"line {line} column {col}", v))
    return out


def scan_outputs(directory: str | os.PathLike, k: int) -> list[Violation]:
    """Scan every published ``.csv``/``.json`` file directly inside ``directory``."""
    out: list[Violation] = []
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and p.suffix in (".csv", ".json") and p.name != "run_manifest.json":
            out.extend(scan_file(p, k))
    return out


# ----------------------------------------------------------------------------
# query answering


TEMPLATES = {
    "group_timeseries": "group_timeseries.csv",
    "flow_matrix": "flows.json",
    "province_counts": "province_counts.csv",
    "lang_counts": "lang_counts.csv",
    "sentiment_weekly": "sentiment_weekly.csv",
}

_ALLOWED_PARAMS = {
    "group_timeseries": {"start", "end"},
    "flow_matrix": {"date_a", "date_b"},
    "province_counts": {"date", "granularity"},
    "lang_counts": {"group"},
    "sentiment_weekly": {"language", "start_week", "end_week"},
}


class QueryError(Exception):
    def __init__(self, code: str, detail: str = ""):
        self.code, self.detail = code, detail
        super().__init__(f"{code}: {detail}" if detail else code)

    def payload(self) -> dict:
        out = {"error": self.code}
        if self.detail:
            out["detail"] = self.detail
        return out


@dataclass(frozen=True)
class QuerySpec:
    template: str
    params: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: Any) -> "QuerySpec":
        if not isinstance(obj, dict) or not isinstance(obj.get("template"), str):
            raise QueryError("BAD_REQUEST", "body must be an object with a string 'template'")
        params = obj.get("params") or {}
        if not isinstance(params, dict):
            raise QueryError("BAD_REQUEST", "'params' must be an object")
        return cls(obj["template"], params)

    def validate(self, policy: PrivacyPolicy) -> None:
        if self.template not in TEMPLATES:
            raise QueryError("TEMPLATE_NOT_ALLOWED", self.template)
        extra = set(self.params) - _ALLOWED_PARAMS[self.template]
        if extra:
            raise QueryError("PARAMS_INVALID", f"unexpected parameter(s) {sorted(extra)}")
        for v in self.params.values():
            if not isinstance(v, str):
                raise QueryError("PARAMS_INVALID", "parameter values must be strings")
        gran = self.params.get("granularity", policy.spatial_floor)
        if gran not in SPATIAL_LEVELS:
            raise QueryError("PARAMS_INVALID", f"unknown granularity {gran!r}")
        if SPATIAL_LEVELS.index(gran) > SPATIAL_LEVELS.index(policy.spatial_floor):
            raise QueryError("GRANULARITY_DENIED", f"{gran} is finer than {policy.spatial_floor}")


def _between(value: str, lo: str | None, hi: str | None) -> bool:
    return (lo is None or value >= lo) and (hi is None or value <= hi)


def select_rows(spec: QuerySpec, records: Any) -> list:
    """Template filtering shared by the store and by direct computation."""
    p = spec.params
    if spec.template == "group_timeseries":
        return [r for r in records if _between(str(r["date"]), p.get("start"), p.get("end"))]
    if spec.template == "province_counts":
        gran = p.get("granularity", "province")
        rows = [r for r in records if r.get("level", "province") == gran]
        return [r for r in rows if "date" not in p or str(r["date"]) == p["date"]]
    if spec.template == "lang_counts":
        return [r for r in records if "group" not in p or r["group"] == p["group"]]
    if spec.template == "sentiment_weekly":
        return [
            r for r in records
            if ("language" not in p or r["language"] == p["language"])
            and _between(str(r["iso_week"]), p.get("start_week"), p.get("end_week"))
        ]
    if spec.template == "flow_matrix":
        flows = records
        for key in ("date_a", "date_b"):
            if key in p and p[key] != flows.get(key):
                raise QueryError("NOT_AVAILABLE", f"only {flows.get('date_a')} -> {flows.get('date_b')} is published")
        return list(flows.get("links", []))
    raise QueryError("TEMPLATE_NOT_ALLOWED", spec.template)


class PublishedStore:
    """Read-only view over a completed run's published directory."""

    def __init__(self, directory: str | os.PathLike, policy: PrivacyPolicy | None = None):
        self.directory = Path(directory)
        meta = self.directory / "privacy.json"
        if policy is None and meta.exists():
            m = json.loads(meta.read_text(encoding="utf-8"))
            policy = PrivacyPolicy(k=int(m["k"]), spatial_floor=m["spatial_floor"])
        self.policy = policy or PrivacyPolicy()
        self._cache: dict[str, Any] = {}
        self._lock = threading.Lock()

    def load(self, template: str) -> Any:
        with self._lock:
            if template not in self._cache:
                path = self.directory / TEMPLATES[template]
                if not path.exists():
                    raise QueryError("NOT_AVAILABLE", f"{path.name} not published")
                data = path.read_bytes()
                self._cache[template] = json.loads(data) if path.suffix == ".json" else csv_to_records(data)
            return self._cache[template]


def answer_query(spec: QuerySpec | dict, store: PublishedStore) -> dict:
    if isinstance(spec, dict):
        spec = QuerySpec.from_json(spec)
    spec.validate(store.policy)
    data = select_rows(spec, store.load(spec.template))
    return {"policy": store.policy.metadata(), "data": data}


def response_bytes(obj: Any) -> bytes:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True).encode("utf-8")


class _Handler(BaseHTTPRequestHandler):
    store: PublishedStore
    token: str | None = None
    max_body = 1 << 16

    def log_message(self, fmt, *args):  # route through logging
        log.info("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, obj: Any) -> None:
        body = response_bytes(obj)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/health":
            self._send(HTTPStatus.OK, {"status": "ok", "templates": sorted(TEMPLATES)})
        else:
            self._send(HTTPStatus.NOT_FOUND, {"error": "NOT_FOUND"})

    def do_POST(self):
        if self.path != "/query":
            self._send(HTTPStatus.NOT_FOUND, {"error": "NOT_FOUND"})
            return
        if self.token is not None and self.headers.get("Authorization") != f"Bearer {self.token}":
            self._send(HTTPStatus.UNAUTHORIZED, {"error": "UNAUTHORIZED"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.max_body:
            self._send(HTTPStatus.BAD_REQUEST, {"error": "BAD_REQUEST", "detail": "body too large"})
            return
        try:
            body = json.loads(self.rfile.read(length) or b"null")
            self._send(HTTPStatus.OK, answer_query(QuerySpec.from_json(body), self.store))
        except json.JSONDecodeError:
            self._send(HTTPStatus.BAD_REQUEST, {"error": "BAD_REQUEST", "detail": "invalid JSON"})
        except QueryError as exc:
            self._send(HTTPStatus.BAD_REQUEST, exc.payload())


def make_server(store: PublishedStore, host: str = "127.0.0.1", port: int = 8000, token: str | None = None) -> ThreadingHTTPServer:
    handler = type("QueryHandler", (_Handler,), {"store": store, "token": token})
    return ThreadingHTTPServer((host, port), handler)
