import json
import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trafficforge.anonymizer import AnonymizationPolicy, MasterKey, derive_keyset  # noqa: E402
from trafficforge.botnetsim import ScenarioConfig  # noqa: E402
from trafficforge.logmodel import ConnRecord, make_uid  # noqa: E402

INFRA = {
    "report_server": {"ip": "203.0.113.10", "port": 48101},
    "loader": {"ip": "203.0.113.11", "http_port": 80},
    "c2_server": {"ip": "203.0.113.12", "port": 23},
    "external": True,
}


def scenario_dict(seed=1, duration=1800.0, pool=None, seeds=None, **over):
    obj = {
        "rng_seed": seed,
        "duration": duration,
        "seed_bots": ["10.0.1.1"] if seeds is None else seeds,
        "vulnerable_pool": pool or ["10.0.1.0/26"],
        "allowed_scan_ranges": ["10.0.0.0/20"],
        "excluded_ranges": ["10.0.8.0/24"],
        "infrastructure": dict(INFRA),
        "scan_rate": 1.0,
        "benign": {"population_size": 64},
    }
    obj.update(over)
    return obj


def make_scenario(**kw) -> ScenarioConfig:
    return ScenarioConfig.from_json(scenario_dict(**kw))


def write_scenario(path, **kw):
    Path(path).write_text(json.dumps(scenario_dict(**kw)))
    return str(path)


def random_record(rng: random.Random, ts=None) -> ConnRecord:
    v6 = rng.random() < 0.2

    def addr():
        if v6:
            return str(__import__("ipaddress").IPv6Address(rng.getrandbits(128)))
        return ".".join(str(rng.randrange(256)) for _ in range(4))

    def maybe(fn):
        r = rng.random()
        return None if r < 0.2 else fn()

    def text():
        alphabet = "abcXYZ09-_ \\,()#\t\u00e9"
        return "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 8)))

    return ConnRecord(
        ts=ts if ts is not None else round(rng.uniform(1e9, 2e9), 6),
        uid=make_uid(rng),
        orig_h=addr(), orig_p=rng.randrange(65536),
        resp_h=addr(), resp_p=rng.randrange(65536),
        proto=rng.choice(["tcp", "udp", "icmp"]),
        service=maybe(text),
        duration=maybe(lambda: round(rng.uniform(0, 5000), 6)),
        orig_bytes=maybe(lambda: rng.randrange(10**9)),
        resp_bytes=maybe(lambda: rng.randrange(10**9)),
        conn_state=maybe(text),
        history=maybe(text),
        orig_pkts=maybe(lambda: rng.randrange(10**6)),
        resp_pkts=maybe(lambda: rng.randrange(10**6)),
    )


@pytest.fixture(scope="session")
def master():
    return MasterKey.from_hex("0f" * 32)


@pytest.fixture(scope="session")
def keys(master):
    return derive_keyset(master)


@pytest.fixture
def policy():
    return AnonymizationPolicy.default()


ACCEPTANCE_LINES = []


def acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line for an acceptance criterion, then assert it."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
