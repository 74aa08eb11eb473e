"""Acceptance criteria 1-10, each reported as one pass/fail line."""
import ipaddress
import json
import os
import random
import subprocess
import sys
import time
import tracemalloc
from pathlib import Path

import pytest

from conftest import acceptance, make_scenario, random_record, scenario_dict
from oracles import lcp_bits
from trafficforge.anonymizer import (AnonymizationPolicy, MasterKey, anon_ip, anonymize_file,
                                     derive_keyset)
from trafficforge.botnetsim import (ScenarioConfig, merge_files, merge_streams, simulate,
                                    simulate_to_files, verify_safety)
from trafficforge.labeler import (Label, LabelReport, default_mirai_ruleset, label_records, label_stream,
                                  roster_from_scenario)
from trafficforge.logmodel import (JSONL, TSV, ConnRecord, LogReader, LogWriter, parse_conn_line,
                                   parse_json_line, serialize_conn)
from trafficforge.natural import generate_natural
from trafficforge.pipeline import run_recreation, synthetic_natural

ROOT = Path(__file__).resolve().parent.parent
SCENARIO_6H = ROOT / "demos" / "scenario_6h.json"
KEY = MasterKey.from_hex("5eed" * 16)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def _random_scenario(rng: random.Random) -> ScenarioConfig:
    """A randomized scenario: seed, pool, rate, excluded carve-out and seed bots all vary."""
    third = rng.randrange(0, 8)
    size = rng.choice([26, 27, 28])
    pool = f"10.0.{third}.0/{size}"
    hosts = list(ipaddress.ip_network(pool).hosts())
    seeds = [str(h) for h in rng.sample(hosts, rng.randint(1, 3))]
    excluded = f"10.0.{rng.randrange(8, 16)}.0/24"
    return make_scenario(seed=rng.getrandbits(32), duration=rng.choice([1200.0, 1800.0]), pool=[pool],
                         seeds=seeds, scan_rate=rng.uniform(0.5, 2.0), excluded_ranges=[excluded])


@pytest.fixture(scope="module")
def recreation(tmp_path_factory):
    """The 6-hour recreation with 10^5 synthetic natural records."""
    out = tmp_path_factory.mktemp("recreation") / "out"
    t0 = time.perf_counter()
    manifest = run_recreation(SCENARIO_6H, out, KEY, natural_records=100_000)
    return out, manifest, time.perf_counter() - t0


@pytest.fixture(scope="module")
def randomized_runs():
    rng = random.Random(20210101)
    runs = []
    for _ in range(10):
        cfg = _random_scenario(rng)
        records, truths, summary = simulate(cfg)
        runs.append((cfg, records, truths, summary))
    return runs


@pytest.fixture(scope="module")
def natural_100k(tmp_path_factory):
    path = tmp_path_factory.mktemp("natural") / "natural.log"
    with LogWriter(path) as w:
        for rec in generate_natural(100_000, 1609459200.0, 86400.0, seed=42):
            w.write(rec)
    return path


def test_criterion_01_labeling_coverage(recreation):
    out, manifest, seconds = recreation
    cfg = ScenarioConfig.load(SCENARIO_6H)
    report = json.loads((out / "label_report.json").read_text())
    shape_ok = (cfg.duration == 6 * 3600 and len(cfg.seed_ips()) >= 1 and len(cfg.pool_ips()) >= 50
                and all(n.prefixlen <= 16 for n in cfg.allowed_networks()) and cfg.excluded_ranges
                and manifest["natural"]["synthetic_records"] >= 100_000)
    ok = shape_ok and report["coverage"] >= 0.999 and seconds < 300
    acceptance(1, "labeling coverage", ok,
               f"coverage={report['coverage']:.6f} over {report['total']} records "
               f"(UNLABELED={report['counts']['UNLABELED']}), runtime {seconds:.1f}s")


def test_criterion_02_label_fidelity(randomized_runs):
    stage_errors = 0
    natural_total = natural_right = 0
    attack = 0
    for i, (cfg, records, truths, _) in enumerate(randomized_runs):
        rules = default_mirai_ruleset(roster_from_scenario(cfg))
        natural = list(synthetic_natural(cfg, 5000, seed=i))
        stages = {t.uid: t.stage for t in truths}
        report = LabelReport()
        for _ in label_records(merge_streams(natural, records), rules, stages, report):
            pass
        stage_errors += report.stage_errors()
        row = report.confusion
        natural_total += sum(r.get(Label.NATURAL.value, 0) for r in row.values())
        natural_right += row.get(Label.NATURAL.value, {}).get(Label.NATURAL.value, 0)
        attack += sum(report.counts[s.value] for s in (Label.SCAN, Label.REPORT, Label.DOWNLOAD, Label.C2))
    ok = stage_errors == 0 and natural_total > 0 and natural_right == natural_total and attack > 0
    acceptance(2, "label fidelity", ok,
               f"{stage_errors} stage errors across {len(randomized_runs)} scenarios ({attack} attack records); "
               f"NATURAL {natural_right}/{natural_total}")


def test_criterion_03_prefix_preservation():
    keys = derive_keyset(KEY)
    rng = random.Random(3)
    failures = 0

    def pairs(bits, count):
        for i in range(count):
            a = rng.getrandbits(bits)
            if i % 2:
                b = rng.getrandbits(bits)
            else:  # force a shared prefix of random length so every LCP value is exercised
                keep = rng.randrange(bits + 1)
                mask = ((1 << keep) - 1) << (bits - keep)
                b = (a & mask) | (rng.getrandbits(bits) & ~mask & ((1 << bits) - 1))
            yield a, b

    for bits, count, cls in ((32, 10_000, ipaddress.IPv4Address), (128, 1000, ipaddress.IPv6Address)):
        for a, b in pairs(bits, count):
            x, y = str(cls(a)), str(cls(b))
            failures += lcp_bits(anon_ip(x, keys), anon_ip(y, keys)) != lcp_bits(x, y)
    block = [anon_ip(f"10.1.2.{i}", keys) for i in range(256)]
    distinct = len(set(block))
    shared = min(lcp_bits(block[0], o) for o in block)
    ok = failures == 0 and distinct == 256 and shared >= 24
    acceptance(3, "prefix preservation", ok,
               f"{failures} LCP failures over 10^4 v4 + 10^3 v6 pairs; /24 -> {distinct} distinct, "
               f"shared prefix {shared} bits")


def test_criterion_04_consistency(natural_100k, tmp_path):
    policy = AnonymizationPolicy.default()
    keys = derive_keyset(KEY)
    anonymize_file(natural_100k, tmp_path / "a.log", policy, keys)
    anonymize_file(natural_100k, tmp_path / "b.log", policy, derive_keyset(MasterKey.from_hex(KEY.hex())))
    # a fresh interpreter stands in for a second host
    env = dict(os.environ, TRAFFICFORGE_KEY=KEY.hex())
    subprocess.run([sys.executable, "-m", "trafficforge", "anonymize", "--in", str(natural_100k),
                    "--out", str(tmp_path / "c.log"), "--jobs", "1"], check=True, env=env, capture_output=True)
    same = (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes() \
        == (tmp_path / "c.log").read_bytes()

    raw = bytearray(KEY.secret)
    raw[0] ^= 0x01
    flipped = derive_keyset(MasterKey(bytes(raw)))
    ips = set()
    with LogReader(natural_100k) as reader:
        for rec in reader:
            ips.add(rec.orig_h)
            ips.add(rec.resp_h)
    changed = sum(anon_ip(ip, keys) != anon_ip(ip, flipped) for ip in ips) / len(ips)
    ok = same and changed >= 0.99
    acceptance(4, "cross-run consistency", ok,
               f"three runs byte-identical={same}; one key bit changes {changed:.2%} of {len(ips)} IPs")


def test_criterion_05_safety(randomized_runs):
    total = 0
    checked = 0
    for cfg, records, truths, _ in randomized_runs:
        report = verify_safety(records, cfg, {t.uid: t.stage for t in truths})
        total += len(report.violations)
        checked += report.checked
    cfg, records, truths, _ = randomized_runs[0]
    target = str(cfg.excluded_networks()[0].network_address + 7)
    forged = ConnRecord(records[-1].ts, "Cforged0001", cfg.seed_ips()[0], 41000, target, 23, "tcp")
    injected = verify_safety(records + [forged], cfg)
    ok = total == 0 and len(injected.violations) == 1 and injected.violations[0].uid == "Cforged0001"
    acceptance(5, "safety invariants", ok,
               f"{total} violations over {checked} records in 10 scenarios; injected record -> "
               f"{len(injected.violations)} violation ({injected.violations[0].rule if injected.violations else '-'})")


def test_criterion_06_determinism(tmp_path):
    scen = scenario_dict(seed=606, duration=3600.0, allowed_scan_ranges=["10.0.0.0/16"],
                         excluded_ranges=["10.0.200.0/24"], scan_rate=1.0)
    (tmp_path / "s.json").write_text(json.dumps(scen))
    key = tmp_path / "k.hex"
    key.write_text(KEY.hex())

    def cli(*args):
        res = subprocess.run([sys.executable, "-m", "trafficforge", *map(str, args)], capture_output=True,
                             text=True)
        assert res.returncode == 0, res.stderr
    cli("run-recreation", "--scenario", tmp_path / "s.json", "--natural-synthetic", 20000, "--key", key,
        "--out", tmp_path / "first", "--gzip")
    cli("run-recreation", "--manifest", tmp_path / "first" / "manifest.json", "--key", key,
        "--out", tmp_path / "second")
    a, b = _tree(tmp_path / "first"), _tree(tmp_path / "second")
    ok = a == b and len(a) == 8
    acceptance(6, "determinism", ok, f"{len(a)} published files, identical={a == b}")


def test_criterion_07_codec_round_trip():
    rng = random.Random(7)
    bad = 0
    unset = empty = 0
    for _ in range(10_000):
        rec = random_record(rng)
        for attr in ("service", "conn_state", "history"):
            value = getattr(rec, attr)
            unset += value is None
            empty += value == ""
        bad += parse_conn_line(serialize_conn(rec, TSV)) != rec
        bad += parse_json_line(serialize_conn(rec, JSONL)) != rec
    ok = bad == 0 and unset > 0 and empty > 0
    acceptance(7, "codec round-trip", ok,
               f"{bad} mismatches over 10^4 records x 2 formats ({unset} UNSET and {empty} empty string values)")


def _child_maxrss(args, env=None) -> int:
    """Peak RSS (KiB) of one CLI invocation, measured from a dedicated parent."""
    probe = ("import resource, subprocess, sys\n"
             "subprocess.run(sys.argv[1:], check=True, capture_output=True)\n"
             "print(resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss)\n")
    res = subprocess.run([sys.executable, "-c", probe, sys.executable, "-m", "trafficforge", *map(str, args)],
                         capture_output=True, text=True, check=True, env=env)
    return int(res.stdout.strip())


def _heap_peak(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def test_criterion_08_streaming_memory(tmp_path):
    cfg = ScenarioConfig.load(SCENARIO_6H)
    (tmp_path / "roster.json").write_text(json.dumps(roster_from_scenario(cfg).to_json()))
    rules = default_mirai_ruleset(roster_from_scenario(cfg))
    sizes = (20_000, 200_000)
    for n in sizes:
        with LogWriter(tmp_path / f"in{n}.log") as w:
            for rec in synthetic_natural(cfg, n, seed=8):
                w.write(rec)
    env = dict(os.environ, TRAFFICFORGE_KEY=KEY.hex())
    rss = {}
    heap = {}
    policy = AnonymizationPolicy.default()
    for n in sizes:
        src = tmp_path / f"in{n}.log"
        rss["anonymize", n] = _child_maxrss(["anonymize", "--in", src, "--out", tmp_path / f"a{n}.log",
                                             "--jobs", "1"], env)
        rss["label", n] = _child_maxrss(["label", "--roster", tmp_path / "roster.json", "--in", src,
                                         "--out", tmp_path / f"l{n}.log", "--report", tmp_path / f"r{n}.json"])
        heap["anonymize", n] = _heap_peak(lambda: anonymize_file(src, tmp_path / "h.log", policy,
                                                                 derive_keyset(KEY)))
        heap["label", n] = _heap_peak(lambda: label_stream(src, tmp_path / "h.log", rules))
    small, big = sizes
    ratios = {cmd: rss[cmd, big] / rss[cmd, small] for cmd in ("anonymize", "label")}
    heap_ratios = {cmd: heap[cmd, big] / heap[cmd, small] for cmd in ("anonymize", "label")}
    ok = all(r < 2.0 for r in ratios.values()) and all(r < 2.0 for r in heap_ratios.values())
    acceptance(8, "streaming memory", ok,
               "10x input peak RSS ratio " + ", ".join(f"{c}={r:.3f}" for c, r in ratios.items())
               + "; Python heap ratio " + ", ".join(f"{c}={r:.3f}" for c, r in heap_ratios.items()))


def test_criterion_09_commutation(recreation, tmp_path):
    out, manifest, _ = recreation
    cfg = ScenarioConfig.load(SCENARIO_6H)
    # rebuild the raw merged stream the recreation anonymized, and label it with the raw roster
    simulate_to_files(cfg, tmp_path / "gen.log", tmp_path / "truth.jsonl")
    with LogWriter(tmp_path / "nat.log") as w:
        for rec in synthetic_natural(cfg, manifest["natural"]["synthetic_records"], manifest["natural"]["seed"]):
            w.write(rec)
    merge_files(tmp_path / "nat.log", tmp_path / "gen.log", tmp_path / "raw.log")
    raw_rules = default_mirai_ruleset(roster_from_scenario(cfg))
    compared = mismatches = 0
    with LogReader(tmp_path / "raw.log") as raw, LogReader(out / "conn.labeled.log") as anon:
        for (rec, label), other in zip(label_records(raw, raw_rules), anon):
            compared += 1
            if other.ts != rec.ts or other.extras["attack_stage"] != label.value:
                mismatches += 1
        leftover = next(iter(anon), None)
    ok = mismatches == 0 and leftover is None and compared > 0
    acceptance(9, "commutation", ok,
               f"{mismatches} label mismatches over {compared} records (anonymized roster vs raw roster)")


def test_criterion_10_throughput(natural_100k, tmp_path):
    policy = AnonymizationPolicy.default()
    keys = derive_keyset(KEY)
    rates = []
    for i in range(3):
        t0 = time.perf_counter()
        res = anonymize_file(natural_100k, tmp_path / f"t{i}.log", policy, keys, jobs=1)
        rates.append(res.records / (time.perf_counter() - t0))
    best = max(rates)
    ok = best >= 50_000
    acceptance(10, "throughput floor", ok,
               f"single-thread best of 3: {best:,.0f} records/s (runs: "
               + ", ".join(f"{r:,.0f}" for r in rates) + ")")
