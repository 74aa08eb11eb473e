"""Zeek-style connection records and their TSV / JSON-lines codecs.

``None`` stands for Zeek's unset value (``-`` in TSV, an omitted key in
JSON); ``""`` is the empty string (``(empty)`` in TSV).  The two never
collapse into each other.
"""
from __future__ import annotations

import gzip
import io
import ipaddress
import json
import os
import re
import time
from dataclasses import dataclass, field
from functools import lru_cache
from operator import attrgetter
from typing import Iterator, Optional, Sequence

from .errors import IoFailure, MalformedLine, UnknownFormat

TSV = "zeek-tsv"
JSONL = "json-lines"
FORMATS = (TSV, JSONL)
PROTOS = frozenset({"tcp", "udp", "icmp"})

UNSET_SENTINEL = "-"
EMPTY_SENTINEL = "(empty)"
GZIP_MAGIC = b"\x1f\x8b"

# (attribute, zeek column name, zeek type)
CORE_FIELDS = (
    ("ts", "ts", "time"),
    ("uid", "uid", "string"),
    ("orig_h", "id.orig_h", "addr"),
    ("orig_p", "id.orig_p", "port"),
    ("resp_h", "id.resp_h", "addr"),
    ("resp_p", "id.resp_p", "port"),
    ("proto", "proto", "enum"),
    ("service", "service", "string"),
    ("duration", "duration", "interval"),
    ("orig_bytes", "orig_bytes", "count"),
    ("resp_bytes", "resp_bytes", "count"),
    ("conn_state", "conn_state", "string"),
    ("history", "history", "string"),
    ("orig_pkts", "orig_pkts", "count"),
    ("resp_pkts", "resp_pkts", "count"),
)
DEFAULT_FIELDS = tuple(zeek for _, zeek, _ in CORE_FIELDS)
REQUIRED = frozenset({"ts", "uid", "orig_h", "orig_p", "resp_h", "resp_p", "proto"})

_ATTR_BY_NAME = {}
_TYPE_BY_ATTR = {}
for _attr, _zeek, _type in CORE_FIELDS:
    _ATTR_BY_NAME[_attr] = _attr
    _ATTR_BY_NAME[_zeek] = _attr
    _TYPE_BY_ATTR[_attr] = _type
CORE_ATTRS = frozenset(_TYPE_BY_ATTR)


def canonical_field(name: str) -> str:
    """Map a column name (``id.orig_h`` or ``orig_h``) to its record attribute.

    Unknown names are returned unchanged and live in ``ConnRecord.extras``.
    """
    return _ATTR_BY_NAME.get(name, name)


@dataclass(slots=True)
class ConnRecord:
    ts: float
    uid: str
    orig_h: str
    orig_p: int
    resp_h: str
    resp_p: int
    proto: str
    service: Optional[str] = None
    duration: Optional[float] = None
    orig_bytes: Optional[int] = None
    resp_bytes: Optional[int] = None
    conn_state: Optional[str] = None
    history: Optional[str] = None
    orig_pkts: Optional[int] = None
    resp_pkts: Optional[int] = None
    extras: dict = field(default_factory=dict)

    def get(self, name: str):
        attr = canonical_field(name)
        if attr in CORE_ATTRS:
            return getattr(self, attr)
        return self.extras.get(attr)

    def validate(self) -> None:
        """Raise ``ValueError`` if the record breaks a ConnRecord invariant."""
        if not (self.ts > 0) or self.ts != round(self.ts, 6):
            raise ValueError(f"ts must be positive with microsecond precision: {self.ts!r}")
        if not self.uid:
            raise ValueError("uid must be non-empty")
        if self.proto not in PROTOS:
            raise ValueError(f"proto must be one of {sorted(PROTOS)}: {self.proto!r}")
        for name in ("orig_p", "resp_p"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValueError(f"{name} out of range: {port}")
        for name in ("orig_h", "resp_h"):
            ipaddress.ip_address(getattr(self, name))
        if self.duration is not None and (self.duration < 0 or self.duration != round(self.duration, 6)):
            raise ValueError(f"bad duration: {self.duration!r}")
        for name in ("orig_bytes", "resp_bytes", "orig_pkts", "resp_pkts"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative")


# ---------------------------------------------------------------- escaping

_ESCAPE_CHARS = re.compile(r"[\\\t\n\r]")
_UNESCAPE = re.compile(r"\\x([0-9a-fA-F]{2})")


def _escape(value: str) -> str:
    if value == "":
        return EMPTY_SENTINEL
    if value == UNSET_SENTINEL:
        return "\\x2d"
    if value == EMPTY_SENTINEL:
        return "\\x28empty)"
    if _ESCAPE_CHARS.search(value):
        return _ESCAPE_CHARS.sub(lambda m: "\\x%02x" % ord(m.group()), value)
    return value


def _unescape(text: str) -> str:
    if "\\x" in text:
        return _UNESCAPE.sub(lambda m: chr(int(m.group(1), 16)), text)
    return text


# ---------------------------------------------------------------- TSV decode

@lru_cache(maxsize=1 << 13)
def canonical_ip(text: str) -> str:
    try:
        return str(ipaddress.ip_address(text))
    except ValueError:
        raise ValueError(f"unparsable IP address {text!r}") from None


def _dec_str(text):
    if text == UNSET_SENTINEL:
        return None
    if text == EMPTY_SENTINEL:
        return ""
    return _unescape(text)


def _dec_int(text):
    if text == UNSET_SENTINEL:
        return None
    value = int(text)
    if value < 0:
        raise ValueError(f"negative count {text!r}")
    return value


def _dec_port(text):
    value = int(text)
    if not 0 <= value <= 65535:
        raise ValueError(f"port out of range {text!r}")
    return value


def _dec_time(text):
    value = round(float(text), 6)
    if not value > 0:
        raise ValueError(f"non-positive timestamp {text!r}")
    return value


def _dec_interval(text):
    if text == UNSET_SENTINEL:
        return None
    value = round(float(text), 6)
    if value < 0:
        raise ValueError(f"negative duration {text!r}")
    return value


def _dec_proto(text):
    if text not in PROTOS:
        raise ValueError(f"unknown proto {text!r}")
    return text


def _dec_uid(text):
    if text in (UNSET_SENTINEL, EMPTY_SENTINEL, ""):
        raise ValueError("missing uid")
    return _unescape(text)


_DECODERS = {
    "ts": _dec_time,
    "uid": _dec_uid,
    "orig_h": canonical_ip,
    "orig_p": _dec_port,
    "resp_h": canonical_ip,
    "resp_p": _dec_port,
    "proto": _dec_proto,
    "service": _dec_str,
    "duration": _dec_interval,
    "orig_bytes": _dec_int,
    "resp_bytes": _dec_int,
    "conn_state": _dec_str,
    "history": _dec_str,
    "orig_pkts": _dec_int,
    "resp_pkts": _dec_int,
}


_ATTR_ORDER = tuple(a for a, _, _ in CORE_FIELDS)


@lru_cache(maxsize=64)
def _compile_header(header: tuple):
    """Per-column plan: one getter per record attribute, in constructor order."""
    index = {}
    extras = []
    for idx, name in enumerate(header):
        attr = canonical_field(name)
        if attr in index or attr in (n for _, n in extras):
            raise UnknownFormat(f"duplicate column {name!r} in header")
        if attr in CORE_ATTRS:
            index[attr] = idx
        else:
            extras.append((idx, name))
    missing = REQUIRED - index.keys()
    if missing:
        raise UnknownFormat(f"header lacks required fields: {sorted(missing)}")
    if not extras and tuple(index.get(a) for a in _ATTR_ORDER) == tuple(range(len(_ATTR_ORDER))):
        plan = None  # standard layout
    else:
        plan = tuple((index.get(a), _DECODERS[a]) for a in _ATTR_ORDER)
    return len(header), plan, tuple(extras)


def _opt_count(text):
    if text == UNSET_SENTINEL:
        return None
    value = int(text)
    if value < 0:
        raise ValueError(f"negative count {text!r}")
    return value


_PLAIN = frozenset({UNSET_SENTINEL, EMPTY_SENTINEL})


def _parse_standard(cols) -> ConnRecord:
    # the usual conn.log layout, decoded inline; same rules as _DECODERS
    ts, uid, orig_h, orig_p, resp_h, resp_p, proto, service, dur, ob, rb, state, hist, opk, rpk = cols
    t = round(float(ts), 6)
    if not t > 0:
        raise ValueError(f"non-positive timestamp {ts!r}")
    uid = _dec_uid(uid)
    orig_p = int(orig_p)
    resp_p = int(resp_p)
    if not (0 <= orig_p <= 65535 and 0 <= resp_p <= 65535):
        raise ValueError(f"port out of range {orig_p}/{resp_p}")
    if proto not in PROTOS:
        raise ValueError(f"unknown proto {proto!r}")
    if dur == UNSET_SENTINEL:
        d = None
    else:
        d = round(float(dur), 6)
        if d < 0:
            raise ValueError(f"negative duration {dur!r}")
    return ConnRecord(
        t, uid, canonical_ip(orig_h), orig_p, canonical_ip(resp_h), resp_p, proto,
        _dec_str(service) if service in _PLAIN or "\\x" in service else service,
        d, _opt_count(ob), _opt_count(rb),
        _dec_str(state) if state in _PLAIN or "\\x" in state else state,
        _dec_str(hist) if hist in _PLAIN or "\\x" in hist else hist,
        _opt_count(opk), _opt_count(rpk))


def parse_conn_line(line: str, header: Sequence[str] = DEFAULT_FIELDS, sep: str = "\t") -> ConnRecord:
    """Decode one TSV data line laid out according to ``header``."""
    width, plan, extras = _compile_header(tuple(header))
    cols = line.rstrip("\r\n").split(sep)
    if len(cols) != width:
        raise MalformedLine(f"expected {width} columns, got {len(cols)}")
    try:
        if plan is None:
            return _parse_standard(cols)
        values = [None if idx is None else dec(cols[idx]) for idx, dec in plan]
    except ValueError as exc:
        raise MalformedLine(str(exc)) from None
    if extras:
        return ConnRecord(*values, {name: _dec_str(cols[idx]) for idx, name in extras})
    return ConnRecord(*values)


# ---------------------------------------------------------------- JSON decode

def _json_value(attr, value):
    kind = _TYPE_BY_ATTR[attr]
    if kind == "addr":
        if not isinstance(value, str):
            raise ValueError(f"{attr} must be a string")
        return canonical_ip(value)
    if kind in ("port", "count"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{attr} must be an integer")
        if kind == "port":
            return _dec_port(str(value))
        return _dec_int(str(value))
    if kind == "time":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("ts must be a number")
        return _dec_time(repr(float(value)))
    if kind == "interval":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("duration must be a number")
        return _dec_interval(repr(float(value)))
    if not isinstance(value, str):
        raise ValueError(f"{attr} must be a string")
    if attr == "proto":
        return _dec_proto(value)
    if attr == "uid" and not value:
        raise ValueError("missing uid")
    return value


def parse_json_line(line: str) -> ConnRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedLine("JSON line is not an object")
    kwargs = {}
    extras = {}
    try:
        for key, value in obj.items():
            attr = canonical_field(key)
            if attr not in CORE_ATTRS:
                extras[key] = value
            elif value is not None:
                kwargs[attr] = _json_value(attr, value)
    except ValueError as exc:
        raise MalformedLine(str(exc)) from None
    missing = REQUIRED - kwargs.keys()
    if missing:
        raise MalformedLine(f"missing required fields {sorted(missing)}")
    if extras:
        kwargs["extras"] = extras
    return ConnRecord(**kwargs)


# ---------------------------------------------------------------- encode

def _fmt_extra(value) -> str:
    if value is None:
        return UNSET_SENTINEL
    if isinstance(value, bool):
        return "T" if value else "F"
    if isinstance(value, (list, tuple)):
        return ",".join(_escape(str(v)) for v in value) if value else EMPTY_SENTINEL
    return _escape(str(value))


def _column_formatter(attr: str):
    if attr not in CORE_ATTRS:
        return lambda r: _fmt_extra(r.extras.get(attr))
    get = attrgetter(attr)
    kind = _TYPE_BY_ATTR[attr]
    if kind in ("time", "interval"):
        return lambda r: UNSET_SENTINEL if (v := get(r)) is None else f"{v:.6f}"
    if kind in ("port", "count"):
        return lambda r: UNSET_SENTINEL if (v := get(r)) is None else str(v)
    if kind == "addr" or attr == "proto":
        return lambda r: UNSET_SENTINEL if (v := get(r)) is None else v
    return lambda r: UNSET_SENTINEL if (v := get(r)) is None else _escape(v)


def _s(v):
    return UNSET_SENTINEL if v is None else _escape(v)


def _n(v):
    return UNSET_SENTINEL if v is None else str(v)


def _standard_row(r) -> str:
    d = r.duration
    return (f"{r.ts:.6f}\t{_escape(r.uid)}\t{r.orig_h}\t{r.orig_p}\t{r.resp_h}\t{r.resp_p}\t{r.proto}\t"
            f"{_s(r.service)}\t{UNSET_SENTINEL if d is None else format(d, '.6f')}\t{_n(r.orig_bytes)}\t"
            f"{_n(r.resp_bytes)}\t{_s(r.conn_state)}\t{_s(r.history)}\t{_n(r.orig_pkts)}\t{_n(r.resp_pkts)}")


@lru_cache(maxsize=256)
def _tsv_row(fields: tuple):
    if tuple(canonical_field(n) for n in fields) == _ATTR_ORDER:
        return _standard_row
    cols = tuple(_column_formatter(canonical_field(name)) for name in fields)
    return lambda r: "\t".join([c(r) for c in cols])


def fields_for(record: ConnRecord, base: Sequence[str] = DEFAULT_FIELDS) -> list:
    """Column order for ``record``: ``base`` followed by any extras it carries."""
    names = list(base)
    have = {canonical_field(n) for n in names}
    names.extend(k for k in record.extras if k not in have)
    return names


def serialize_conn(record: ConnRecord, format: str = TSV, fields: Optional[Sequence[str]] = None) -> str:
    """Render ``record`` as one line (no trailing newline).

    ``fields`` fixes the column order; by default the standard conn columns
    followed by the record's extras.
    """
    if fields is None:
        fields = fields_for(record)
    if format == TSV:
        return _tsv_row(tuple(fields))(record)
    if format == JSONL:
        obj = {}
        for name in fields:
            attr = canonical_field(name)
            value = getattr(record, attr) if attr in CORE_ATTRS else record.extras.get(attr)
            if value is not None:
                obj[name] = value
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)
    raise ValueError(f"unknown format {format!r}")


def header_lines(fields: Sequence[str], path: str = "conn") -> list:
    types = [_TYPE_BY_ATTR.get(canonical_field(n), "string") for n in fields]
    return [
        "#separator \\x09",
        "#set_separator\t,",
        f"#empty_field\t{EMPTY_SENTINEL}",
        f"#unset_field\t{UNSET_SENTINEL}",
        f"#path\t{path}",
        "#fields\t" + "\t".join(fields),
        "#types\t" + "\t".join(types),
    ]


# ---------------------------------------------------------------- streams

def format_for_path(path) -> str:
    name = os.fspath(path)
    if name.endswith(".gz"):
        name = name[:-3]
    return JSONL if name.endswith((".jsonl", ".json", ".ndjson")) else TSV


class LogReader:
    """Sequential record cursor over a conn log (TSV or JSON-lines, optionally gzipped).

    Malformed lines are skipped and counted in ``skipped`` unless ``strict``.
    """

    def __init__(self, path, strict: bool = False):
        self.path = os.fspath(path)
        self.strict = strict
        self.skipped = 0
        self.records_read = 0
        self.fields: Optional[list] = None
        self.sep = "\t"
        try:
            with open(self.path, "rb") as fh:
                magic = fh.read(2)
            self.compression = "gzip" if magic == GZIP_MAGIC else "none"
            if self.compression == "gzip":
                self._fh = io.TextIOWrapper(gzip.open(self.path, "rb"), encoding="utf-8", newline="")
            else:
                self._fh = open(self.path, "r", encoding="utf-8", newline="")
        except OSError as exc:
            raise IoFailure(f"cannot open {self.path}: {exc.strerror}") from None
        self._lineno = 0
        self._pending = None
        self.format = self._sniff()

    def _readline(self):
        try:
            line = self._fh.readline()
        except (OSError, EOFError, UnicodeDecodeError) as exc:
            raise IoFailure(f"read failed on {self.path}: {exc}") from None
        if line:
            self._lineno += 1
        return line

    def _sniff(self):
        while True:
            line = self._readline()
            if not line:
                return None
            if line.strip():
                break
        if line.startswith("#"):
            # consume the leading header block so ``fields`` is known up front
            while line and line.startswith("#"):
                self._header(line)
                line = self._readline()
            self._pending = line or None
            return TSV
        self._pending = line
        if line.lstrip().startswith("{"):
            self.fields = list(DEFAULT_FIELDS)
            return JSONL
        raise UnknownFormat(f"{self.path}: neither a Zeek TSV header nor a JSON object")

    def _header(self, line):
        if line.startswith("#separator"):
            raw = line.rstrip("\r\n").split(" ", 1)[1] if " " in line else "\\x09"
            self.sep = _unescape(raw.strip()) or "\t"
        elif line.startswith("#fields"):
            self.fields = line.rstrip("\r\n").split(self.sep)[1:]
            _compile_header(tuple(self.fields))

    def iter_lines(self) -> Iterator[tuple]:
        """Yield ``(fields, lineno, line)`` for every data line, handling headers."""
        if self.format is None:
            return
        while True:
            if self._pending is not None:
                line, self._pending = self._pending, None
            else:
                line = self._readline()
            if not line:
                return
            if self.format == TSV and line.startswith("#"):
                self._header(line)
                continue
            if not line.strip():
                continue
            if self.format == TSV and self.fields is None:
                raise UnknownFormat(f"{self.path}: data before #fields header")
            yield self.fields, self._lineno, line

    def __iter__(self) -> Iterator[ConnRecord]:
        if self.format != TSV:
            yield from self._iter_parsed()
            return
        # hot path for TSV; equivalent to _iter_parsed
        fh = self._fh
        strict = self.strict
        line = self._pending
        self._pending = None
        while True:
            if line is None:
                try:
                    line = fh.readline()
                except (OSError, EOFError, UnicodeDecodeError) as exc:
                    raise IoFailure(f"read failed on {self.path}: {exc}") from None
                if not line:
                    return
                self._lineno += 1
            if line.startswith("#"):
                self._header(line)
            elif line.strip():
                if self.fields is None:
                    raise UnknownFormat(f"{self.path}: data before #fields header")
                try:
                    rec = parse_conn_line(line, self.fields, self.sep)
                except MalformedLine as exc:
                    if strict:
                        raise MalformedLine(str(exc), self._lineno) from None
                    self.skipped += 1
                else:
                    self.records_read += 1
                    yield rec
            line = None

    def _iter_parsed(self) -> Iterator[ConnRecord]:
        for fields, lineno, line in self.iter_lines():
            try:
                if self.format == TSV:
                    rec = parse_conn_line(line, fields, self.sep)
                else:
                    rec = parse_json_line(line)
            except MalformedLine as exc:
                if self.strict:
                    raise MalformedLine(str(exc), lineno) from None
                self.skipped += 1
                continue
            self.records_read += 1
            yield rec

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LogWriter:
    """Record sink.  Output is byte-deterministic: gzip headers carry no mtime
    or filename, and the ``#close`` trailer is derived from the last record."""

    def __init__(self, path, format: Optional[str] = None, fields: Optional[Sequence[str]] = None,
                 compression: Optional[str] = None, log_path: str = "conn"):
        self.path = os.fspath(path)
        self.format = format or format_for_path(self.path)
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}")
        self.compression = compression or ("gzip" if self.path.endswith(".gz") else "none")
        self.fields = list(fields) if fields is not None else list(DEFAULT_FIELDS)
        self.log_path = log_path
        self.count = 0
        self._last_ts = None
        try:
            raw = open(self.path, "wb")
            if self.compression == "gzip":
                self._gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
                self._raw = raw
                binary = self._gz
            else:
                self._gz = None
                self._raw = raw
                binary = raw
            self._fh = io.TextIOWrapper(binary, encoding="utf-8", newline="\n")
        except OSError as exc:
            raise IoFailure(f"cannot open {self.path} for writing: {exc.strerror}") from None
        self._row = _tsv_row(tuple(self.fields)) if self.format == TSV else None
        if self.format == TSV:
            self._emit("\n".join(header_lines(self.fields, log_path)) + "\n")

    def _emit(self, text):
        try:
            self._fh.write(text)
        except OSError as exc:
            raise IoFailure(f"write failed on {self.path}: {exc.strerror}") from None

    def write(self, record: ConnRecord) -> None:
        if self._row is not None:
            try:
                self._fh.write(self._row(record) + "\n")
            except OSError as exc:
                raise IoFailure(f"write failed on {self.path}: {exc.strerror}") from None
            self.count += 1
            self._last_ts = record.ts
            return
        fields = self.fields
        if self.format == JSONL and record.extras:
            # JSON has no header to honour, so extras are never dropped.
            fields = fields_for(record, fields)
        self.write_line(serialize_conn(record, self.format, fields), record.ts)

    def write_line(self, line: str, ts: Optional[float] = None) -> None:
        self._emit(line + "\n")
        self.count += 1
        if ts is not None:
            self._last_ts = ts

    def close(self):
        if self._fh.closed:
            return
        if self.format == TSV:
            stamp = time.strftime("%Y-%m-%d-%H-%M-%S", time.gmtime(self._last_ts or 0))
            self._emit(f"#close\t{stamp}\n")
        try:
            self._fh.close()
            if self._gz is not None:
                self._raw.close()
        except OSError as exc:
            raise IoFailure(f"close failed on {self.path}: {exc.strerror}") from None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def stream_fields(reader: "LogReader") -> list:
    """Column names of an open stream.

    TSV declares them in its header; for JSON-lines this reads the file once
    more to collect every key, in order of first appearance.
    """
    if reader.format != JSONL:
        return list(reader.fields or [])
    names = list(DEFAULT_FIELDS)
    have = set(CORE_ATTRS)
    with LogReader(reader.path) as again:
        for _, _, line in again.iter_lines():
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                for key in obj:
                    if canonical_field(key) not in have:
                        have.add(key)
                        names.append(key)
    return names


def open_stream(path, mode: str = "r", **kwargs):
    """Open a conn log for reading (``"r"``) or writing (``"w"``)."""
    if mode in ("r", "read"):
        return LogReader(path, **kwargs)
    if mode in ("w", "write"):
        return LogWriter(path, **kwargs)
    raise ValueError(f"mode must be 'r' or 'w', not {mode!r}")


_BASE62 = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"


def make_uid(rng) -> str:
    """Zeek-style connection uid: ``C`` plus 17 base-62 characters."""
    return "C" + "".join(rng.choices(_BASE62, k=17))
