import json
import os
import stat
import subprocess
import sys

import pytest

from conftest import write_scenario
from trafficforge import __version__, pipeline
from trafficforge.anonymizer import MasterKey
from trafficforge.botnetsim import SafetyReport, Violation, merge_files
from trafficforge.cli import main
from trafficforge.errors import ConfigViolation, IoFailure, SafetyViolationError
from trafficforge.logmodel import ConnRecord, LogWriter
from trafficforge.natural import generate_natural
from trafficforge.pipeline import (cmd_bench_anonymize, cmd_keygen, cmd_stats, run_from_manifest,
                                   run_recreation)


def _write(path, records):
    with LogWriter(path) as w:
        for r in records:
            w.write(r)
    return path


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


# ---------------------------------------------------------------- keygen

def test_keygen(tmp_path):
    a = cmd_keygen(tmp_path / "a.key")
    b = cmd_keygen(tmp_path / "b.key")
    assert a != b
    text = (tmp_path / "a.key").read_text().strip()
    assert len(text) == 64 and int(text, 16) >= 0
    assert MasterKey.load(tmp_path / "a.key") == a
    assert stat.S_IMODE(os.stat(tmp_path / "a.key").st_mode) == 0o600


def test_keygen_refuses_overwrite(tmp_path):
    cmd_keygen(tmp_path / "k")
    with pytest.raises(IoFailure):
        cmd_keygen(tmp_path / "k")
    cmd_keygen(tmp_path / "k", force=True)


# ---------------------------------------------------------------- stats

def test_stats_empty(tmp_path):
    s = cmd_stats(_write(tmp_path / "e.log", []))
    assert (s.record_count, s.total_bytes, s.distinct_connections, s.per_day) == (0, 0, 0, {})


def test_stats_two_days(tmp_path):
    day = 86400.0
    recs = [ConnRecord(1609459200.0 + dt, f"C{i}", "10.0.0.1", 1, "10.0.0.2", 2, "tcp", orig_bytes=5)
            for i, dt in enumerate([10.0, 20.0, day + 5])]
    s = cmd_stats(_write(tmp_path / "x.log", recs))
    assert list(s.per_day) == ["2021-01-01", "2021-01-02"]
    assert sum(v["records"] for v in s.per_day.values()) == 3 == s.record_count
    assert sum(v["bytes"] for v in s.per_day.values()) == s.total_bytes
    assert s.traffic_bytes == 15 and s.distinct_connections == 3
    assert "2021-01-02" in s.render()


def test_stats_additive_over_merge(tmp_path):
    a = _write(tmp_path / "a.log", generate_natural(700, 1609459200.0, 2 * 86400, seed=1))
    b = _write(tmp_path / "b.log", generate_natural(300, 1609459200.0, 2 * 86400, seed=2))
    merge_files(a, b, tmp_path / "m.log")
    sa, sb, sm = cmd_stats(a), cmd_stats(b), cmd_stats(tmp_path / "m.log")
    assert sm.record_count == sa.record_count + sb.record_count
    assert sm.total_bytes == sa.total_bytes + sb.total_bytes
    assert sm.distinct_connections == sa.distinct_connections + sb.distinct_connections


# ---------------------------------------------------------------- recreation

@pytest.fixture
def small_run(tmp_path):
    scenario = write_scenario(tmp_path / "s.json", seed=4, duration=1200, scan_rate=1.0)
    key = MasterKey.from_hex("42" * 32)
    out = tmp_path / "out"
    manifest = run_recreation(scenario, out, key, natural_records=3000)
    return tmp_path, key, out, manifest


def test_recreation_outputs(small_run):
    _, key, out, manifest = small_run
    names = set(os.listdir(out))
    assert names == {"conn.labeled.log", "truth.jsonl", "roster.json", "safety.json", "label_report.json",
                     "stats.json", "summary.json", "manifest.json"}
    assert manifest["version"] == __version__
    assert manifest["key_fingerprint"] == key.fingerprint()
    report = json.loads((out / "label_report.json").read_text())
    assert report["stage_errors"] == 0 and report["coverage"] == 1.0
    blob = b"".join(_tree(out).values())
    assert key.hex().encode() not in blob
    # the raw pool addresses never reach the published tree
    assert b"10.0.1.1\t" not in blob and b'"10.0.1.1"' not in blob


def test_rerun_from_manifest_is_identical(small_run):
    tmp_path, key, out, _ = small_run
    again = tmp_path / "again"
    run_from_manifest(out / "manifest.json", again, key)
    assert _tree(out) == _tree(again)


def test_manifest_rejects_other_key(small_run):
    tmp_path, _, out, _ = small_run
    with pytest.raises(ConfigViolation, match="fingerprint"):
        run_from_manifest(out / "manifest.json", tmp_path / "x", MasterKey.generate())


def test_safety_violation_publishes_nothing(tmp_path, monkeypatch):
    scenario = write_scenario(tmp_path / "s.json", duration=300)
    monkeypatch.setattr(pipeline, "verify_safety",
                        lambda *a, **k: SafetyReport(1, [Violation("Cx", "excluded-target", "forged")]))
    out = tmp_path / "out"
    with pytest.raises(SafetyViolationError):
        run_recreation(scenario, out, MasterKey.generate(), natural_records=100)
    assert os.listdir(out) == []


def test_bench_report_shape(tmp_path):
    path = _write(tmp_path / "n.log", generate_natural(4000, 1609459200.0, 3600, seed=3))
    report = cmd_bench_anonymize(path, MasterKey.generate(), jobs=2)
    assert report["single"]["records"] == report["parallel"]["records"] == 4000
    assert report["single"]["records_per_second"] > 0 and report["parallel"]["jobs"] == 2
    assert report["memory"]["ratio"] is not None


# ---------------------------------------------------------------- CLI

def _cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "trafficforge", *map(str, args)], capture_output=True,
                          text=True, env={**os.environ, **(env or {})})


def test_cli_version():
    res = _cli("--version")
    assert res.returncode == 0 and __version__ in res.stdout


@pytest.mark.parametrize("args,code,category", [
    (["bogus"], 2, "usage"),
    (["anonymize", "--in", "x"], 2, "usage"),
    (["stats", "--in", "/nonexistent/file.log"], 5, "io"),
])
def test_cli_error_codes(args, code, category):
    res = _cli(*args)
    assert res.returncode == code
    lines = res.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error: {category}:")


def test_cli_config_and_safety_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rng_seed": 1}))
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert capsys.readouterr().err.startswith("error: config:")
    monkeypatch.setattr("trafficforge.cli.verify_safety",
                        lambda *a, **k: SafetyReport(1, [Violation("Cx", "excluded-target", "forged")]))
    scenario = write_scenario(tmp_path / "s.json", duration=60)
    assert main(["simulate", "--scenario", scenario, "--out", str(tmp_path / "o")]) == 4
    assert capsys.readouterr().err.startswith("error: safety:")


def test_cli_key_errors(tmp_path):
    log = _write(tmp_path / "n.log", generate_natural(10, 1609459200.0, 60, seed=1))
    res = _cli("anonymize", "--in", log, "--out", tmp_path / "o.log", env={"TRAFFICFORGE_KEY": "zz"})
    assert res.returncode == 3 and "zz" not in res.stderr
    env = dict(os.environ)
    env.pop("TRAFFICFORGE_KEY", None)
    res = subprocess.run([sys.executable, "-m", "trafficforge", "anonymize", "--in", str(log), "--out",
                          str(tmp_path / "o.log")], capture_output=True, text=True, env=env)
    assert res.returncode == 3


def test_cli_end_to_end(tmp_path):
    key = tmp_path / "k.hex"
    assert _cli("keygen", "--out", key).returncode == 0
    scenario = write_scenario(tmp_path / "s.json", duration=600)
    assert _cli("simulate", "--scenario", scenario, "--out", tmp_path / "sim", "--key", key).returncode == 0
    nat = _write(tmp_path / "nat.log", generate_natural(500, 1609459200.0, 600, seed=1))
    assert _cli("merge", "--natural", nat, "--generated", tmp_path / "sim/conn.log",
                "--out", tmp_path / "m.log").returncode == 0
    assert _cli("anonymize", "--key", key, "--in", tmp_path / "m.log", "--out", tmp_path / "a.log",
                "--jobs", "1").returncode == 0
    res = _cli("label", "--roster", tmp_path / "sim/roster.anon.json", "--in", tmp_path / "a.log",
               "--out", tmp_path / "l.log", "--report", tmp_path / "r.json")
    assert res.returncode == 0, res.stderr
    assert json.loads((tmp_path / "r.json").read_text())["coverage"] == 1.0
    res = _cli("stats", "--in", tmp_path / "l.log", "--json", tmp_path / "st.json")
    assert res.returncode == 0 and "NATURAL" in res.stdout
    res = _cli("run-recreation", "--scenario", scenario, "--natural", nat, "--key", key,
               "--out", tmp_path / "rr")
    assert res.returncode == 0, res.stderr
    res = _cli("run-recreation", "--manifest", tmp_path / "rr/manifest.json", "--key", key,
               "--out", tmp_path / "rr2")
    assert res.returncode == 0, res.stderr
    assert _tree(tmp_path / "rr") == _tree(tmp_path / "rr2")
