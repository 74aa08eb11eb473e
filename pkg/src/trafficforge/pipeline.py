"""Orchestration: key generation, dataset statistics, the end-to-end
recreation run with its reproducibility manifest, and the anonymization
benchmark."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import time
import tracemalloc
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

from . import __version__
from .anonymizer import (AnonymizationPolicy, MasterKey, RecordAnonymizer, anonymize_file,
                         derive_keyset)
from .botnetsim import (ScenarioConfig, TruthRecord, TruthWriter, merge_files, read_truth,
                        simulate_to_files, verify_safety)
from .errors import ConfigViolation, IoFailure, MalformedLine, SafetyViolationError
from .labeler import LABEL_FIELD, default_mirai_ruleset, label_stream, roster_from_scenario
from .logmodel import JSONL, TSV, LogReader, LogWriter, parse_conn_line, parse_json_line
from .natural import generate_natural


def write_json(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror}") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror}") from None
    return h.hexdigest()


# ---------------------------------------------------------------- keygen

def cmd_keygen(out_path, force: bool = False) -> MasterKey:
    """Write a fresh 256-bit key as 64 hex characters, mode 0600 where supported."""
    key = MasterKey.generate()
    flags = os.O_WRONLY | os.O_CREAT | (os.O_TRUNC if force else os.O_EXCL)
    try:
        fd = os.open(out_path, flags, 0o600)
        with os.fdopen(fd, "w", encoding="ascii") as fh:
            fh.write(key.hex() + "\n")
    except FileExistsError:
        raise IoFailure(f"{out_path} already exists (use --force to overwrite)") from None
    except OSError as exc:
        raise IoFailure(f"cannot write key file {out_path}: {exc.strerror}") from None
    return key


def load_key(path=None) -> MasterKey:
    return MasterKey.load(path) if path else MasterKey.from_env()


# ---------------------------------------------------------------- stats

@dataclass
class DatasetStats:
    record_count: int = 0
    total_bytes: int = 0
    traffic_bytes: int = 0
    distinct_connections: int = 0
    skipped: int = 0
    per_day: dict = field(default_factory=dict)
    label_counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "record_count": self.record_count,
            "total_bytes": self.total_bytes,
            "traffic_bytes": self.traffic_bytes,
            "distinct_connections": self.distinct_connections,
            "skipped": self.skipped,
            "per_day": {day: dict(v) for day, v in sorted(self.per_day.items())},
            "label_counts": dict(sorted(self.label_counts.items())),
        }

    def render(self) -> str:
        rows = [("day", "records", "log bytes", "connections")]
        for day, v in sorted(self.per_day.items()):
            rows.append((day, str(v["records"]), str(v["bytes"]), str(v["connections"])))
        rows.append(("total", str(self.record_count), str(self.total_bytes), str(self.distinct_connections)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        if self.label_counts:
            lines.append("")
            lines.extend(f"{label:<18}{n}" for label, n in sorted(self.label_counts.items()))
        return "\n".join(lines)


def cmd_stats(path, strict: bool = False) -> DatasetStats:
    """One streaming pass; days are UTC, connections are distinct uids.

    Distinct counting keeps one set of uids, so memory grows with the number
    of connections rather than staying constant.
    """
    stats = DatasetStats()
    all_uids = set()
    day_uids = defaultdict(set)
    days = {}
    with LogReader(path, strict=strict) as reader:
        for fields, lineno, line in reader.iter_lines():
            try:
                if reader.format == TSV:
                    rec = parse_conn_line(line, fields, reader.sep)
                else:
                    rec = parse_json_line(line)
            except MalformedLine as exc:
                if strict:
                    raise MalformedLine(str(exc), lineno) from None
                stats.skipped += 1
                continue
            size = len(line.rstrip("\r\n").encode("utf-8")) + 1
            day = datetime.fromtimestamp(int(rec.ts), tz=timezone.utc).strftime("%Y-%m-%d")
            bucket = days.get(day)
            if bucket is None:
                bucket = days[day] = {"records": 0, "bytes": 0, "connections": 0}
            bucket["records"] += 1
            bucket["bytes"] += size
            stats.record_count += 1
            stats.total_bytes += size
            stats.traffic_bytes += (rec.orig_bytes or 0) + (rec.resp_bytes or 0)
            all_uids.add(rec.uid)
            day_uids[day].add(rec.uid)
            label = rec.extras.get(LABEL_FIELD)
            if label is not None:
                stats.label_counts[label] = stats.label_counts.get(label, 0) + 1
    for day, uids in day_uids.items():
        days[day]["connections"] = len(uids)
    stats.per_day = days
    stats.distinct_connections = len(all_uids)
    return stats


# ---------------------------------------------------------------- recreation

def anonymize_truth(truth: TruthRecord, anon: RecordAnonymizer) -> TruthRecord:
    """Pseudonymize a truth entry the same way its connection record was."""
    return TruthRecord(anon.value("uid", truth.uid), truth.stage, anon.value("orig_h", truth.actor), truth.note)


def synthetic_natural(config: ScenarioConfig, n: int, seed: int):
    """Stand-in natural traffic over the scenario window, clear of every roster IP."""
    avoid = set(config.pool_ips()) | set(config.infrastructure.ips().values())
    internal = [str(net) for net in config.allowed_networks() if net.version == 4] or ["10.20.0.0/16"]
    return generate_natural(n, config.start_ts, max(config.duration, 1.0), seed, internal_networks=internal,
                            avoid=avoid, avoid_networks=[config.benign.population_range])


def _suffix(fmt, compress):
    return (".jsonl" if fmt == JSONL else ".log") + (".gz" if compress else "")


def run_recreation(scenario_path, out_dir, key: MasterKey, *, policy_path=None, natural_path=None,
                   natural_records: int = 0, natural_seed: Optional[int] = None,
                   seed: Optional[int] = None, start_ts: Optional[float] = None, fmt: str = TSV,
                   compress: bool = False, jobs: int = 1, strict: bool = False) -> dict:
    """simulate -> verify safety -> merge with natural -> anonymize -> label.

    Work happens in a staging directory; outputs are published into
    ``out_dir`` only after every stage succeeded, and raw (unanonymized)
    intermediates never leave staging.  Returns the manifest.
    """
    config = ScenarioConfig.load(scenario_path)
    if seed is not None:
        config.rng_seed = int(seed)
    if start_ts is not None:
        config.start_ts = float(start_ts)
    config.validate()
    policy = AnonymizationPolicy.load(policy_path) if policy_path else AnonymizationPolicy.default()
    keys = derive_keyset(key, policy.classes)
    if natural_path is None and natural_records <= 0:
        raise ConfigViolation("give a natural traffic file or a synthetic natural record count")
    if natural_seed is None:
        natural_seed = config.rng_seed + 1

    os.makedirs(out_dir, exist_ok=True)
    stage = os.path.join(out_dir, ".staging")
    shutil.rmtree(stage, ignore_errors=True)
    os.makedirs(stage)
    try:
        manifest = _recreate(config, stage, out_dir, keys, key, policy, scenario_path, policy_path,
                             natural_path, natural_records, natural_seed, fmt, compress, jobs, strict)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return manifest


def _recreate(config, stage, out_dir, keys, key, policy, scenario_path, policy_path, natural_path,
              natural_records, natural_seed, fmt, compress, jobs, strict):
    raw_gen = os.path.join(stage, "generated.raw.log")
    raw_truth = os.path.join(stage, "truth.raw.jsonl")
    summary = simulate_to_files(config, raw_gen, raw_truth)

    truth_map = {t.uid: t.stage for t in read_truth(raw_truth)}
    with LogReader(raw_gen, strict=True) as reader:
        safety = verify_safety(reader, config, truth_map)
    del truth_map
    if not safety.ok:
        first = safety.violations[0]
        raise SafetyViolationError(f"{len(safety.violations)} safety violations, first: {first.rule} {first.detail}")

    if natural_path is None:
        natural_src = os.path.join(stage, "natural.raw.log")
        with LogWriter(natural_src) as writer:
            for rec in synthetic_natural(config, natural_records, natural_seed):
                writer.write(rec)
        natural_info = {"synthetic_records": natural_records, "seed": natural_seed}
    else:
        natural_src = natural_path
        natural_info = {"path": os.path.abspath(natural_path), "sha256": sha256_file(natural_path)}

    merged = os.path.join(stage, "merged.raw.log")
    merge_files(natural_src, raw_gen, merged, strict=strict)

    suffix = _suffix(fmt, compress)
    anon_log = os.path.join(stage, "conn.anon" + suffix)
    anonymize_file(merged, anon_log, policy, keys, strict=strict, jobs=jobs, out_format=fmt)

    pub = {}
    pub["truth.jsonl"] = os.path.join(stage, "truth.jsonl")
    with TruthWriter(pub["truth.jsonl"]) as out:
        anon = RecordAnonymizer(policy, keys)
        for t in read_truth(raw_truth):
            out.write(anonymize_truth(t, anon))

    roster = roster_from_scenario(config, keys)
    pub["roster.json"] = os.path.join(stage, "roster.json")
    write_json(pub["roster.json"], roster.to_json())

    labeled_name = "conn.labeled" + suffix
    pub[labeled_name] = os.path.join(stage, labeled_name)
    report = label_stream(anon_log, pub[labeled_name], default_mirai_ruleset(roster),
                          truth=pub["truth.jsonl"], strict=strict)

    pub["label_report.json"] = os.path.join(stage, "label_report.json")
    write_json(pub["label_report.json"], report.to_json())
    pub["safety.json"] = os.path.join(stage, "safety.json")
    write_json(pub["safety.json"], safety.to_json())
    pub["summary.json"] = os.path.join(stage, "summary.json")
    write_json(pub["summary.json"], summary.to_json())
    pub["stats.json"] = os.path.join(stage, "stats.json")
    write_json(pub["stats.json"], cmd_stats(pub[labeled_name]).to_json())

    manifest = {
        "tool": "trafficforge",
        "version": __version__,
        "scenario": {"path": os.path.abspath(scenario_path), "sha256": sha256_file(scenario_path),
                     "rng_seed": config.rng_seed, "start_ts": config.start_ts},
        "policy": {"path": os.path.abspath(policy_path) if policy_path else None,
                   "sha256": sha256_file(policy_path) if policy_path else None,
                   "effective": policy.to_json()},
        "natural": natural_info,
        "key_fingerprint": key.fingerprint(),
        "format": fmt,
        "gzip": compress,
        "strict": strict,
        "outputs": {name: sha256_file(path) for name, path in sorted(pub.items())},
    }
    pub["manifest.json"] = os.path.join(stage, "manifest.json")
    write_json(pub["manifest.json"], manifest)
    for name, path in pub.items():
        os.replace(path, os.path.join(out_dir, name))
    return manifest


def run_from_manifest(manifest_path, out_dir, key: MasterKey, jobs: int = 1) -> dict:
    """Re-execute a recreation from its manifest after checking key and input digests."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            m = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {manifest_path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigViolation(f"manifest is not valid JSON: {exc.msg}") from None
    if key.fingerprint() != m["key_fingerprint"]:
        raise ConfigViolation("key does not match the manifest's key fingerprint")
    scenario = m["scenario"]
    if sha256_file(scenario["path"]) != scenario["sha256"]:
        raise ConfigViolation(f"scenario {scenario['path']} changed since the manifest was written")
    policy_path = m["policy"]["path"]
    if policy_path and sha256_file(policy_path) != m["policy"]["sha256"]:
        raise ConfigViolation(f"policy {policy_path} changed since the manifest was written")
    natural = m["natural"]
    if "path" in natural and sha256_file(natural["path"]) != natural["sha256"]:
        raise ConfigViolation(f"natural input {natural['path']} changed since the manifest was written")
    return run_recreation(
        scenario["path"], out_dir, key, policy_path=policy_path,
        natural_path=natural.get("path"), natural_records=natural.get("synthetic_records", 0),
        natural_seed=natural.get("seed"), seed=scenario["rng_seed"], start_ts=scenario["start_ts"],
        fmt=m["format"], compress=m["gzip"], jobs=jobs, strict=m.get("strict", False))


# ---------------------------------------------------------------- bench

def _python_peak(in_path, policy, keys, limit=None) -> tuple:
    """Peak traced Python allocation while anonymizing up to ``limit`` records."""
    anon = RecordAnonymizer(policy, keys)
    with tempfile.TemporaryDirectory() as tmp:
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            n = 0
            with LogReader(in_path) as reader, LogWriter(os.path.join(tmp, "out.log"),
                                                         fields=reader.fields) as writer:
                for rec in reader:
                    writer.write(anon(rec))
                    n += 1
                    if limit is not None and n >= limit:
                        break
            peak = tracemalloc.get_traced_memory()[1] - base
        finally:
            tracemalloc.stop()
    return n, peak


def cmd_bench_anonymize(in_path, key: MasterKey, policy: Optional[AnonymizationPolicy] = None,
                        jobs: Optional[int] = None) -> dict:
    """Throughput of the anonymization stage, single-process and with ``jobs`` workers,
    plus the peak Python allocation on the first tenth of the input vs. all of it."""
    policy = policy or AnonymizationPolicy.default()
    keys = derive_keyset(key, policy.classes)
    jobs = jobs or os.cpu_count() or 1
    size = os.path.getsize(in_path)
    report = {"input": os.path.abspath(in_path), "input_bytes": size, "cpu_count": os.cpu_count()}
    with tempfile.TemporaryDirectory() as tmp:
        for name, j in (("single", 1), ("parallel", jobs)):
            t0 = time.perf_counter()
            res = anonymize_file(in_path, os.path.join(tmp, f"{name}.out"), policy, derive_keyset(key, policy.classes),
                                 jobs=j)
            dt = time.perf_counter() - t0
            report[name] = {"jobs": j, "records": res.records, "seconds": round(dt, 4),
                            "records_per_second": round(res.records / dt, 1) if dt else None,
                            "bytes_per_second": round(size / dt, 1) if dt else None}
    total = report["single"]["records"]
    small_n, small_peak = _python_peak(in_path, policy, derive_keyset(key, policy.classes),
                                       limit=max(1, total // 10))
    full_n, full_peak = _python_peak(in_path, policy, keys)
    ratio = full_peak / small_peak if small_peak else None
    report["memory"] = {"small_records": small_n, "small_peak_bytes": small_peak,
                        "full_records": full_n, "full_peak_bytes": full_peak,
                        "ratio": round(ratio, 3) if ratio else None,
                        "constant": ratio is not None and ratio < 2.0}
    return report


def cmd_anonymize_records_per_second(in_path, key, policy=None) -> float:
    """Single-process records/second; what the throughput floor is checked against."""
    return cmd_bench_anonymize(in_path, key, policy, jobs=1)["single"]["records_per_second"]


__all__ = [
    "DatasetStats", "cmd_bench_anonymize", "cmd_keygen", "cmd_stats", "load_key",
    "run_from_manifest", "run_recreation", "sha256_file", "synthetic_natural", "write_json",
]
