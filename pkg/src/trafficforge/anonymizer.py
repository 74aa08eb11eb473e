"""Keyed, deterministic anonymization of connection records.

Every secret is derived from one 256-bit master key, so the same key yields
the same pseudonyms across log types, sites and re-runs.
"""
from __future__ import annotations

import hashlib
import hmac
import ipaddress
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from itertools import islice
from operator import attrgetter
from typing import Iterable, Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (ConfigViolation, InvalidAddress, IoFailure, MalformedLine, PolicyGap,
                     UnknownClass)
from .logmodel import (CORE_ATTRS, REQUIRED, TSV, ConnRecord, LogReader, LogWriter,
                       canonical_field, fields_for, parse_conn_line, parse_json_line, serialize_conn,
                       stream_fields)

KEY_ENV = "TRAFFICFORGE_KEY"
DEFAULT_CLASSES = ("uid", "host", "user", "service", "history", "conn_state")
DEFAULT_HASH_LENGTH = 16
_CONTEXT = b"trafficforge/v1/"


class MasterKey:
    """256-bit secret.  Its bytes never appear in ``repr`` or error text."""

    __slots__ = ("_secret",)

    def __init__(self, secret: bytes):
        if not isinstance(secret, (bytes, bytearray)) or len(secret) != 32:
            raise ConfigViolation("master key must be exactly 32 bytes")
        self._secret = bytes(secret)

    @classmethod
    def generate(cls) -> "MasterKey":
        return cls(secrets.token_bytes(32))

    @classmethod
    def from_hex(cls, text: str) -> "MasterKey":
        text = text.strip()
        if len(text) != 64:
            raise ConfigViolation("key must be 64 hex characters")
        try:
            return cls(bytes.fromhex(text))
        except ValueError:
            raise ConfigViolation("key must be 64 hex characters") from None

    @classmethod
    def load(cls, path) -> "MasterKey":
        try:
            with open(path, "r", encoding="ascii") as fh:
                text = fh.read()
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"cannot read key file {path}: {getattr(exc, 'strerror', None) or 'not ASCII'}") from None
        return cls.from_hex(text)

    @classmethod
    def from_env(cls, var: str = KEY_ENV) -> "MasterKey":
        text = os.environ.get(var)
        if text is None:
            raise ConfigViolation(f"environment variable {var} is not set")
        return cls.from_hex(text)

    @property
    def secret(self) -> bytes:
        return self._secret

    def hex(self) -> str:
        return self._secret.hex()

    def fingerprint(self) -> str:
        """Short keyed digest that identifies the key without revealing it."""
        return hmac.new(self._secret, _CONTEXT + b"fingerprint", hashlib.sha256).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, MasterKey) and hmac.compare_digest(self._secret, other._secret)

    def __hash__(self):
        return hash(self.fingerprint())

    def __repr__(self):
        return "MasterKey(<redacted>)"


def _subkey(secret: bytes, label: str) -> bytes:
    return hmac.new(secret, _CONTEXT + label.encode("utf-8"), hashlib.sha256).digest()


class KeySet:
    """Per-purpose subkeys derived from one master key."""

    def __init__(self, ip_key: bytes, field_keys: dict):
        if any(len(k) != 32 for k in [ip_key, *field_keys.values()]):
            raise ConfigViolation("subkeys must be 32 bytes")
        self.ip_key = ip_key
        self.field_keys = dict(field_keys)
        self._ip_cipher = None

    def field_key(self, cls: str) -> bytes:
        try:
            return self.field_keys[cls]
        except KeyError:
            raise UnknownClass(f"no subkey derived for field class {cls!r}") from None

    @property
    def ip_cipher(self) -> "PrefixPreservingCipher":
        if self._ip_cipher is None:
            self._ip_cipher = PrefixPreservingCipher(self.ip_key)
        return self._ip_cipher

    def secrets(self) -> list:
        return [self.ip_key, *self.field_keys.values()]

    def __getstate__(self):
        return {"ip_key": self.ip_key, "field_keys": self.field_keys}

    def __setstate__(self, state):
        self.__init__(state["ip_key"], state["field_keys"])

    def __eq__(self, other):
        return (isinstance(other, KeySet) and self.ip_key == other.ip_key
                and self.field_keys == other.field_keys)

    def __repr__(self):
        return f"KeySet(classes={sorted(self.field_keys)})"


def derive_keyset(master: MasterKey, classes: Iterable[str] = ()) -> KeySet:
    """Derive the IP subkey and one subkey per hash class (defaults plus ``classes``)."""
    wanted = sorted(set(DEFAULT_CLASSES) | set(classes))
    for cls in wanted:
        if cls == "ip":
            raise ConfigViolation("'ip' is reserved and cannot be a hash class")
    return KeySet(
        ip_key=_subkey(master.secret, "ip"),
        field_keys={cls: _subkey(master.secret, "field/" + cls) for cls in wanted},
    )


# ---------------------------------------------------------------- IPs

class PrefixPreservingCipher:
    """Crypto-PAn style prefix-preserving map over IPv4 and IPv6.

    Output bit i is input bit i XOR a pseudorandom bit of the i-bit input
    prefix.  That bit is the top bit of AES-256 applied to the prefix, a
    single 1 delimiter bit and zero padding.  The delimiter makes prefixes of
    different length map to distinct blocks, which is how the length is
    encoded.  All prefixes of one address go through a single ECB call.
    IPv4 and IPv6 use separately derived AES keys.
    """

    CACHE_LIMIT = 1 << 13

    def __init__(self, ip_key: bytes):
        self._enc = {
            4: Cipher(algorithms.AES(_subkey(ip_key, "v4")), modes.ECB()).encryptor(),
            6: Cipher(algorithms.AES(_subkey(ip_key, "v6")), modes.ECB()).encryptor(),
        }
        self._plans = {4: self._plan(32), 6: self._plan(128)}
        self._lock = threading.Lock()
        self._cache = {}

    @staticmethod
    def _plan(width):
        shift = 128 - width
        full = (1 << width) - 1
        return width, shift, [
            ((full << (width - i)) & full, 1 << (127 - i)) for i in range(width)
        ]

    def anonymize_int(self, value: int, version: int) -> int:
        width, shift, plan = self._plans[version]
        blocks = b"".join((((value & mask) << shift) | delim).to_bytes(16, "big") for mask, delim in plan)
        with self._lock:
            out = self._enc[version].update(blocks)
        pad = 0
        for byte in out[::16]:
            pad = (pad << 1) | (byte >> 7)
        return value ^ pad

    def anonymize(self, addr) -> str:
        key = addr if isinstance(addr, str) else str(addr)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        try:
            ip = ipaddress.ip_address(addr)
        except ValueError:
            raise InvalidAddress(f"not an IP address: {addr!r}") from None
        family = ipaddress.IPv4Address if ip.version == 4 else ipaddress.IPv6Address
        result = str(family(self.anonymize_int(int(ip), ip.version)))
        if len(self._cache) >= self.CACHE_LIMIT:
            self._cache.clear()
        self._cache[key] = result
        return result


_CIPHERS = {}


def anon_ip(addr, key) -> str:
    """Prefix-preserving pseudonym of ``addr`` under an IP subkey or KeySet."""
    if isinstance(key, KeySet):
        return key.ip_cipher.anonymize(addr)
    cipher = _CIPHERS.get(key)
    if cipher is None:
        if len(_CIPHERS) > 16:
            _CIPHERS.clear()
        cipher = _CIPHERS[key] = PrefixPreservingCipher(key)
    return cipher.anonymize(addr)


def common_prefix_len(a, b) -> int:
    """Longest common prefix, in bits, of two same-family addresses."""
    a = ipaddress.ip_address(a)
    b = ipaddress.ip_address(b)
    if a.version != b.version:
        raise ValueError("addresses belong to different families")
    width = a.max_prefixlen
    diff = int(a) ^ int(b)
    return width - diff.bit_length()


# ---------------------------------------------------------------- fields

def anon_field(value: Optional[str], cls: str, keys: KeySet, length: int = DEFAULT_HASH_LENGTH):
    """Keyed one-way token for ``value`` as ``length`` lowercase hex chars; ``None`` stays ``None``."""
    subkey = keys.field_key(cls)
    if value is None:
        return None
    if not 1 <= length <= 64:
        raise ConfigViolation("hash length must be between 1 and 64 hex characters")
    if not isinstance(value, str):
        value = json.dumps(value, sort_keys=True)
    return hashlib.blake2b(value.encode("utf-8"), key=subkey, digest_size=32).hexdigest()[:length]


# ---------------------------------------------------------------- policy

PASSTHROUGH = "passthrough"
IP = "ip"
DROP = "drop"

_STRING_ATTRS = frozenset({"uid", "service", "conn_state", "history"})
_ADDR_ATTRS = frozenset({"orig_h", "resp_h"})


def _check_directive(name: str, directive: str) -> str:
    if directive in (PASSTHROUGH, IP, DROP):
        kind = directive
    elif directive.startswith("hash:") and len(directive) > 5:
        kind = "hash"
        if directive[5:] == "ip":
            raise ConfigViolation("'ip' is reserved and cannot be a hash class")
    else:
        raise ConfigViolation(f"bad directive {directive!r} for field {name!r}")
    if name in CORE_ATTRS:
        if kind == DROP and name in REQUIRED:
            raise ConfigViolation(f"required field {name!r} cannot be dropped")
        if kind == IP and name not in _ADDR_ATTRS:
            raise ConfigViolation(f"field {name!r} is not an address")
        if kind == "hash" and name not in _STRING_ATTRS:
            raise ConfigViolation(f"field {name!r} is not a string field and cannot be hashed")
    return directive


DEFAULT_DIRECTIVES = {
    "ts": PASSTHROUGH,
    "uid": "hash:uid",
    "orig_h": IP,
    "orig_p": PASSTHROUGH,
    "resp_h": IP,
    "resp_p": PASSTHROUGH,
    "proto": PASSTHROUGH,
    "service": PASSTHROUGH,
    "duration": PASSTHROUGH,
    "orig_bytes": PASSTHROUGH,
    "resp_bytes": PASSTHROUGH,
    "conn_state": PASSTHROUGH,
    "history": PASSTHROUGH,
    "orig_pkts": PASSTHROUGH,
    "resp_pkts": PASSTHROUGH,
}


@dataclass(frozen=True)
class AnonymizationPolicy:
    """Field name -> directive (``passthrough``, ``ip``, ``hash:<class>``, ``drop``).

    Any field missing from ``directives`` makes ``anonymize_record`` fail.
    """

    directives: dict = field(default_factory=lambda: dict(DEFAULT_DIRECTIVES))
    passthrough_ips: tuple = ()
    hash_length: int = DEFAULT_HASH_LENGTH

    def __post_init__(self):
        norm = {}
        for name, directive in self.directives.items():
            attr = canonical_field(name)
            norm[attr] = _check_directive(attr, directive)
        object.__setattr__(self, "directives", norm)
        nets = tuple(ipaddress.ip_network(n, strict=False) for n in self.passthrough_ips)
        object.__setattr__(self, "passthrough_ips", nets)
        if not 1 <= self.hash_length <= 64:
            raise ConfigViolation("hash_length must be between 1 and 64")

    @classmethod
    def default(cls) -> "AnonymizationPolicy":
        return cls()

    @classmethod
    def from_json(cls, obj: dict) -> "AnonymizationPolicy":
        """Overlay a JSON policy on the defaults.

        Accepts either a flat ``{field: directive}`` object or
        ``{"fields": {...}, "passthrough_ips": [...], "hash_length": n}``.
        """
        if not isinstance(obj, dict):
            raise ConfigViolation("policy must be a JSON object")
        if "fields" in obj:
            fields = obj["fields"]
            extra_keys = set(obj) - {"fields", "passthrough_ips", "hash_length"}
            if extra_keys:
                raise ConfigViolation(f"unknown policy keys {sorted(extra_keys)}")
        else:
            fields = obj
        if not isinstance(fields, dict) or not all(isinstance(v, str) for v in fields.values()):
            raise ConfigViolation("policy fields must map names to directive strings")
        directives = dict(DEFAULT_DIRECTIVES)
        directives.update({canonical_field(k): v for k, v in fields.items()})
        try:
            return cls(directives=directives,
                       passthrough_ips=tuple(obj.get("passthrough_ips", ())) if "fields" in obj else (),
                       hash_length=int(obj.get("hash_length", DEFAULT_HASH_LENGTH)) if "fields" in obj
                       else DEFAULT_HASH_LENGTH)
        except ValueError as exc:
            raise ConfigViolation(str(exc)) from None

    @classmethod
    def load(cls, path) -> "AnonymizationPolicy":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read policy {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigViolation(f"policy {path} is not valid JSON: {exc.msg}") from None
        return cls.from_json(obj)

    def with_directive(self, name: str, directive: str) -> "AnonymizationPolicy":
        directives = dict(self.directives)
        directives[canonical_field(name)] = directive
        return AnonymizationPolicy(directives, tuple(str(n) for n in self.passthrough_ips), self.hash_length)

    @property
    def classes(self) -> set:
        return {d[5:] for d in self.directives.values() if d.startswith("hash:")}

    def dropped(self) -> set:
        return {name for name, d in self.directives.items() if d == DROP}

    def to_json(self) -> dict:
        return {
            "fields": dict(sorted(self.directives.items())),
            "passthrough_ips": [str(n) for n in self.passthrough_ips],
            "hash_length": self.hash_length,
        }


def _ip_transform(policy, keys):
    cipher = keys.ip_cipher
    cache = cipher._cache
    nets = policy.passthrough_ips
    if not nets:
        return lambda addr: cache.get(addr) or cipher.anonymize(addr)

    def transform(addr):
        ip = ipaddress.ip_address(addr)
        if any(ip in net for net in nets):
            return addr
        return cipher.anonymize(addr)
    return transform


def _transform_for(directive, policy, keys):
    if directive == IP:
        ip = _ip_transform(policy, keys)
        return lambda v: None if v is None else ip(v)
    if directive.startswith("hash:"):
        cls = directive[5:]
        subkey = keys.field_key(cls)
        length = policy.hash_length
        if not 1 <= length <= 64:
            raise ConfigViolation("hash length must be between 1 and 64 hex characters")
        blake = hashlib.blake2b

        def hashed(v):
            if v is None:
                return None
            if not isinstance(v, str):
                return anon_field(v, cls, keys, length)
            return blake(v.encode("utf-8"), key=subkey, digest_size=32).hexdigest()[:length]
        return hashed
    if directive == DROP:
        return lambda v: None
    return None


class RecordAnonymizer:
    """Compiled form of (policy, keys); call it on a record."""

    def __init__(self, policy: AnonymizationPolicy, keys: KeySet):
        self.policy = policy
        self.keys = keys
        missing = CORE_ATTRS - policy.directives.keys()
        if missing:
            raise PolicyGap(f"policy has no directive for {sorted(missing)}")
        self._core = [(attr, _transform_for(policy.directives[attr], policy, keys))
                      for attr in _ORDER]
        self._getters = tuple(self._getter(attr, policy.directives[attr], fn) for attr, fn in self._core)
        self._extras = {}

    def _getter(self, attr, directive, fn):
        get = attrgetter(attr)
        if fn is None:
            return get
        if directive == IP and not self.policy.passthrough_ips:
            # the common case gets a single frame per field
            cipher = self.keys.ip_cipher
            cache = cipher._cache
            return lambda r: None if (v := get(r)) is None else (cache.get(v) or cipher.anonymize(v))
        return lambda r: fn(get(r))

    def value(self, attr: str, v):
        """Transform one core field value the way a record's field would be."""
        fn = dict(self._core)[attr]
        return v if fn is None else fn(v)

    def _extra_transform(self, name):
        try:
            return self._extras[name]
        except KeyError:
            pass
        directive = self.policy.directives.get(name)
        if directive is None:
            raise PolicyGap(f"no directive for field {name!r}")
        fn = self._extras[name] = (directive, _transform_for(directive, self.policy, self.keys))
        return fn

    def __call__(self, record: ConnRecord) -> ConnRecord:
        values = [get(record) for get in self._getters]
        if not record.extras:
            return ConnRecord(*values)
        extras = {}
        for name, value in record.extras.items():
            directive, fn = self._extra_transform(name)
            if directive == DROP:
                continue
            extras[name] = value if fn is None else fn(value)
        return ConnRecord(*values, extras)


_ORDER = ("ts", "uid", "orig_h", "orig_p", "resp_h", "resp_p", "proto", "service", "duration",
          "orig_bytes", "resp_bytes", "conn_state", "history", "orig_pkts", "resp_pkts")


def anonymize_record(record: ConnRecord, policy: AnonymizationPolicy, keys: KeySet) -> ConnRecord:
    """Apply ``policy`` to one record.  Prefer ``RecordAnonymizer`` in loops."""
    return RecordAnonymizer(policy, keys)(record)


# ---------------------------------------------------------------- files

@dataclass
class AnonymizeResult:
    records: int = 0
    skipped: int = 0
    bytes_in: int = 0
    seconds: float = 0.0
    output_fields: list = field(default_factory=list)


def output_fields(input_fields, policy: AnonymizationPolicy) -> list:
    """Input columns minus dropped extras (dropped core columns stay, unset)."""
    dropped = policy.dropped()
    return [n for n in input_fields
            if canonical_field(n) in CORE_ATTRS or canonical_field(n) not in dropped]


_worker = {}


def _worker_init(policy, keys, fmt, sep, out_format, strict):
    _worker.update(anon=RecordAnonymizer(policy, keys), fmt=fmt, sep=sep,
                   out_format=out_format, strict=strict)


def _worker_chunk(args):
    fields, out_fields, lines = args
    anon = _worker["anon"]
    out = []
    skipped = 0
    for lineno, line in lines:
        try:
            if _worker["fmt"] == TSV:
                rec = parse_conn_line(line, fields, _worker["sep"])
            else:
                rec = parse_json_line(line)
        except MalformedLine as exc:
            if _worker["strict"]:
                return None, 0, (str(exc), lineno)
            skipped += 1
            continue
        rec = anon(rec)
        out.append((serialize_conn(rec, _worker["out_format"], _json_fields(rec, out_fields, _worker["out_format"])), rec.ts))
    return out, skipped, None


def _json_fields(rec, fields, fmt):
    if fmt != TSV and rec.extras:
        return fields_for(rec, fields)
    return fields


def anonymize_file(in_path, out_path, policy: AnonymizationPolicy, keys: KeySet, *,
                   strict: bool = False, jobs: int = 1, out_format: Optional[str] = None,
                   chunk_size: int = 4096) -> AnonymizeResult:
    """Stream ``in_path`` through the policy into ``out_path`` in constant memory.

    With ``jobs > 1`` records are transformed by a process pool; output order
    always matches input order.
    """
    t0 = time.perf_counter()
    result = AnonymizeResult()
    RecordAnonymizer(policy, keys)  # fail fast on core policy gaps
    with LogReader(in_path, strict=strict) as reader:
        fmt = out_format or reader.format or TSV
        # TSV output needs every column up front, JSON input only reveals them by reading
        fields = stream_fields(reader) if fmt == TSV else (reader.fields or [])
        out_fields = output_fields(fields, policy) if reader.format else []
        with LogWriter(out_path, format=fmt, fields=out_fields or None) as writer:
            if jobs <= 1:
                anon = RecordAnonymizer(policy, keys)
                for rec in reader:
                    writer.write(anon(rec))
                result.records = reader.records_read
                result.skipped = reader.skipped
            else:
                _anonymize_parallel(reader, writer, policy, keys, fmt, out_fields, strict, jobs,
                                    chunk_size, result)
        result.output_fields = list(writer.fields)
    result.seconds = time.perf_counter() - t0
    try:
        result.bytes_in = os.path.getsize(in_path)
    except OSError:
        pass
    return result


def _chunks(reader, out_fields_for, size):
    it = reader.iter_lines()
    while True:
        batch = list(islice(it, size))
        if not batch:
            return
        fields = batch[0][0]
        run = []
        for f, lineno, line in batch:
            if f is not fields:
                yield fields, out_fields_for(fields), run
                fields, run = f, []
            run.append((lineno, line))
        yield fields, out_fields_for(fields), run


def _anonymize_parallel(reader, writer, policy, keys, fmt, out_fields, strict, jobs, chunk_size, result):
    import multiprocessing as mp

    def out_fields_for(fields):
        return output_fields(fields, policy) if reader.format == TSV else out_fields

    with mp.get_context("fork" if hasattr(os, "fork") else "spawn").Pool(
            jobs, initializer=_worker_init,
            initargs=(policy, keys, reader.format, reader.sep, fmt, strict)) as pool:
        for out, skipped, error in pool.imap(_worker_chunk, _chunks(reader, out_fields_for, chunk_size)):
            if error is not None:
                raise MalformedLine(error[0], error[1])
            result.skipped += skipped
            for line, ts in out:
                writer.write_line(line, ts)
            result.records += len(out)


def reanonymize_archive(raw_path, out_path, old_policy: AnonymizationPolicy,
                        new_policy: AnonymizationPolicy, keys: KeySet, **kwargs) -> dict:
    """Re-run anonymization of a retained raw archive under ``new_policy``.

    One-way transforms are never inverted: the raw archive is the input.
    Returns the run summary plus the fields whose directive changed.
    """
    changed = sorted(
        name for name in set(old_policy.directives) | set(new_policy.directives)
        if old_policy.directives.get(name) != new_policy.directives.get(name)
    )
    res = anonymize_file(raw_path, out_path, new_policy, keys, **kwargs)
    return {"records": res.records, "skipped": res.skipped, "changed_fields": changed}
