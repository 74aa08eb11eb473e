"""Discrete-event recreation of a defanged Mirai deployment.

Infected nodes scan, brute-force vulnerable nodes, report them, and the
loader infects them over HTTP; every bot keeps a long-lived C2 session and
all experiment nodes run human-like browsing.  Each emitted connection
record has exactly one ground-truth annotation.

Defanging safeguards enforced here:

* only nodes of the pre-selected pool can ever be infected;
* scan targets are drawn from the allowed ranges with excluded ranges and
  infrastructure carved out;
* credentials are long random alphanumeric strings planted only on pool
  nodes, so a brute force against anything else never succeeds;
* there is no attack (DDoS) capability at all.
"""
from __future__ import annotations

import bisect
import hashlib
import heapq
import ipaddress
import json
import math
import random
import string
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator, Optional

from .errors import ConfigViolation, IoFailure, SinkFailure, UnsortedInput
from .logmodel import (ConnRecord, LogReader, LogWriter, canonical_field, canonical_ip, make_uid,
                       stream_fields)

SCAN = "SCAN"
REPORT = "REPORT"
DOWNLOAD = "DOWNLOAD"
C2 = "C2"
GENERATED_BENIGN = "GENERATED_BENIGN"
STAGES = (SCAN, REPORT, DOWNLOAD, C2, GENERATED_BENIGN)

CLEAN = "clean"
PENDING = "pending"
INFECTED = "infected"
INFRASTRUCTURE = "infrastructure"

MAX_POOL = 1 << 16


# ---------------------------------------------------------------- config

@dataclass
class Infrastructure:
    report_ip: str
    loader_ip: str
    c2_ip: str
    report_port: int = 48101
    loader_port: int = 80
    c2_port: int = 23
    external: bool = True

    def ips(self) -> dict:
        return {"report": self.report_ip, "loader": self.loader_ip, "c2": self.c2_ip}


@dataclass
class CredentialSpec:
    username_len: int = 20
    password_len: int = 25
    alphabet: str = "alphanumeric"
    dictionary_size: int = 8


@dataclass
class BenignProfile:
    browse_rate: float = 1 / 90
    search_rate: float = 1 / 240
    min_delay: float = 2.0
    max_delay: float = 900.0
    population_size: int = 400
    population_range: str = "198.18.0.0/15"


@dataclass
class ScenarioConfig:
    rng_seed: int
    duration: float
    seed_bots: list
    vulnerable_pool: list
    allowed_scan_ranges: list
    excluded_ranges: list
    infrastructure: Infrastructure
    scan_rate: float = 0.2
    credential_spec: CredentialSpec = field(default_factory=CredentialSpec)
    dial_success_prob: float = 0.02
    benign: BenignProfile = field(default_factory=BenignProfile)
    start_ts: float = 1609459200.0
    scan_ports: tuple = (23, 2323)
    c2_refresh: float = 1800.0
    loader_delay: tuple = (1.0, 8.0)

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        try:
            obj = dict(obj)
            infra = obj.pop("infrastructure")
            infra = Infrastructure(
                report_ip=infra["report_server"]["ip"],
                report_port=int(infra["report_server"].get("port", 48101)),
                loader_ip=infra["loader"]["ip"],
                loader_port=int(infra["loader"].get("http_port", 80)),
                c2_ip=infra["c2_server"]["ip"],
                c2_port=int(infra["c2_server"].get("port", 23)),
                external=bool(infra.get("external", True)),
            )
            cred = CredentialSpec(**obj.pop("credential_spec", {}))
            benign = BenignProfile(**obj.pop("benign", {}))
            for key in ("scan_ports", "loader_delay"):
                if key in obj:
                    obj[key] = tuple(obj[key])
            return cls(infrastructure=infra, credential_spec=cred, benign=benign, **obj)
        except (KeyError, TypeError) as exc:
            raise ConfigViolation(f"malformed scenario: {exc}") from None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read scenario {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigViolation(f"scenario {path} is not valid JSON: {exc.msg}") from None
        return cls.from_json(obj)

    def to_json(self) -> dict:
        i = self.infrastructure
        obj = asdict(self)
        obj["infrastructure"] = {
            "report_server": {"ip": i.report_ip, "port": i.report_port},
            "loader": {"ip": i.loader_ip, "http_port": i.loader_port},
            "c2_server": {"ip": i.c2_ip, "port": i.c2_port},
            "external": i.external,
        }
        obj["scan_ports"] = list(self.scan_ports)
        obj["loader_delay"] = list(self.loader_delay)
        return obj

    # derived sets -------------------------------------------------------

    def pool_ips(self) -> list:
        out = []
        seen = set()
        for entry in self.vulnerable_pool:
            for ip in _expand(entry):
                if ip not in seen:
                    seen.add(ip)
                    out.append(ip)
                    if len(out) > MAX_POOL:
                        raise ConfigViolation(f"vulnerable_pool larger than {MAX_POOL} addresses")
        return out

    def seed_ips(self) -> list:
        return [_ip(s, "seed_bots") for s in self.seed_bots]

    def allowed_networks(self) -> list:
        return [_net(n, "allowed_scan_ranges") for n in self.allowed_scan_ranges]

    def excluded_networks(self) -> list:
        return [_net(n, "excluded_ranges") for n in self.excluded_ranges]

    def benign_network(self):
        return _net(self.benign.population_range, "benign.population_range")

    def benign_population(self) -> list:
        """Synthetic external destinations for generated benign traffic.

        Drawn from a dedicated RNG stream so the roster and the safety
        checker can recompute it from the config alone.
        """
        net = self.benign_network()
        size = self.benign.population_size
        if size < 2 or size > net.num_addresses // 2:
            raise ConfigViolation("benign.population_size must be >= 2 and at most half the population_range")
        rng = random.Random(_stream_seed(self.rng_seed, "benign-population"))
        picked = sorted(rng.sample(range(1, net.num_addresses - 1), size))
        return [str(net.network_address + off) for off in picked]

    def validate(self) -> None:
        """Raise ``ConfigViolation`` naming the first broken invariant."""
        if not self.duration >= 0:
            raise ConfigViolation("duration must be non-negative")
        if not self.scan_rate > 0:
            raise ConfigViolation("scan_rate must be positive")
        if not 0.0 <= self.dial_success_prob <= 1.0:
            raise ConfigViolation("dial_success_prob must lie in [0, 1]")
        if not self.start_ts > 0:
            raise ConfigViolation("start_ts must be positive")
        if not self.c2_refresh > 0:
            raise ConfigViolation("c2_refresh must be positive")
        lo, hi = self.loader_delay
        if not 0 <= lo <= hi:
            raise ConfigViolation("loader_delay must be an ordered non-negative pair")
        if not self.scan_ports or not all(0 < p < 65536 for p in self.scan_ports):
            raise ConfigViolation("scan_ports must be non-empty valid ports")
        pool = self.pool_ips()
        allowed = self.allowed_networks()
        excluded = self.excluded_networks()
        if not allowed:
            raise ConfigViolation("allowed_scan_ranges must not be empty")
        in_excluded = [ip for ip in pool if _in_any(ip, excluded)]
        if in_excluded:
            raise ConfigViolation(f"excluded_ranges ∩ vulnerable_pool must be empty (e.g. {in_excluded[0]})")
        outside = [ip for ip in pool if not _in_any(ip, allowed)]
        if outside:
            raise ConfigViolation(f"vulnerable_pool must lie within allowed_scan_ranges (e.g. {outside[0]})")
        pool_set = set(pool)
        for seed in self.seed_ips():
            if seed not in pool_set:
                raise ConfigViolation(f"seed bot {seed} is outside vulnerable_pool")
        infra = self.infrastructure
        for role, ip in infra.ips().items():
            ip = _ip(ip, f"infrastructure.{role}")
            if ip in pool_set:
                raise ConfigViolation(f"infrastructure {role} {ip} must not be in vulnerable_pool")
            if _in_any(ip, excluded):
                raise ConfigViolation(f"infrastructure {role} {ip} lies in excluded_ranges")
        if len(set(infra.ips().values())) != 3:
            raise ConfigViolation("report, loader and c2 must have distinct IPs")
        benign = self.benign_network()
        for net in allowed + excluded:
            if net.version == benign.version and net.overlaps(benign):
                raise ConfigViolation("benign.population_range must be disjoint from scan ranges")
        for ip in list(infra.ips().values()):
            if _in_any(ip, [benign]):
                raise ConfigViolation("benign.population_range must not contain infrastructure")
        if _scan_space_size(allowed, excluded) <= len(infra.ips()) + 1:
            raise ConfigViolation("allowed_scan_ranges minus excluded_ranges leaves no scan targets")
        cred = self.credential_spec
        if cred.alphabet != "alphanumeric":
            raise ConfigViolation("credential_spec.alphabet must be 'alphanumeric'")
        if cred.username_len < 1 or cred.password_len < 1 or cred.dictionary_size < 1:
            raise ConfigViolation("credential lengths and dictionary_size must be positive")
        b = self.benign
        if b.browse_rate < 0 or b.search_rate < 0 or not 0 <= b.min_delay <= b.max_delay:
            raise ConfigViolation("benign rates must be >= 0 and 0 <= min_delay <= max_delay")
        self.benign_population()


def _ip(text, what):
    try:
        return canonical_ip(str(text))
    except ValueError:
        raise ConfigViolation(f"{what}: invalid address {text!r}") from None


def _net(text, what):
    try:
        return ipaddress.ip_network(str(text), strict=False)
    except ValueError:
        raise ConfigViolation(f"{what}: invalid network {text!r}") from None


def _expand(entry):
    if "/" not in str(entry):
        return [_ip(entry, "vulnerable_pool")]
    net = _net(entry, "vulnerable_pool")
    if net.num_addresses > MAX_POOL:
        raise ConfigViolation(f"vulnerable_pool entry {entry} is larger than {MAX_POOL} addresses")
    hosts = list(net.hosts()) if net.num_addresses > 2 else list(net)
    return [str(h) for h in hosts]


def _in_any(ip, nets) -> bool:
    addr = ipaddress.ip_address(ip)
    return any(addr.version == n.version and addr in n for n in nets)


def _stream_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _intervals(allowed, excluded):
    """Integer ranges ``(version, lo, hi)`` of allowed space minus excluded space."""
    out = []
    for net in allowed:
        pieces = [(int(net.network_address), int(net.broadcast_address))]
        for ex in excluded:
            if ex.version != net.version:
                continue
            elo, ehi = int(ex.network_address), int(ex.broadcast_address)
            nxt = []
            for lo, hi in pieces:
                if ehi < lo or elo > hi:
                    nxt.append((lo, hi))
                    continue
                if lo < elo:
                    nxt.append((lo, elo - 1))
                if ehi < hi:
                    nxt.append((ehi + 1, hi))
            pieces = nxt
        out.extend((net.version, lo, hi) for lo, hi in pieces)
    return _merge_overlaps(out)


def _merge_overlaps(ranges):
    merged = []
    for version, lo, hi in sorted(ranges):
        if merged and merged[-1][0] == version and lo <= merged[-1][2] + 1:
            merged[-1] = (version, merged[-1][1], max(hi, merged[-1][2]))
        else:
            merged.append((version, lo, hi))
    return merged


def _scan_space_size(allowed, excluded):
    return sum(hi - lo + 1 for _, lo, hi in _intervals(allowed, excluded))


class ScanSampler:
    """Uniform draw over the allowed scan space, never returning a forbidden IP."""

    def __init__(self, allowed, excluded, forbidden=()):
        self.ranges = _intervals(allowed, excluded)
        self.cumulative = []
        total = 0
        for _, lo, hi in self.ranges:
            total += hi - lo + 1
            self.cumulative.append(total)
        self.total = total
        self.forbidden = set(forbidden)

    def sample(self, rng: random.Random, avoid: str = "") -> str:
        while True:
            r = rng.randrange(self.total)
            i = bisect.bisect_right(self.cumulative, r)
            version, lo, _ = self.ranges[i]
            base = self.cumulative[i - 1] if i else 0
            value = lo + (r - base)
            ip = str(ipaddress.IPv4Address(value) if version == 4 else ipaddress.IPv6Address(value))
            if ip not in self.forbidden and ip != avoid:
                return ip


# ---------------------------------------------------------------- state

@dataclass(frozen=True)
class TruthRecord:
    uid: str
    stage: str
    actor: str
    note: str = ""

    def to_json(self) -> str:
        return json.dumps({"uid": self.uid, "stage": self.stage, "actor": self.actor, "note": self.note},
                          separators=(",", ":"))


@dataclass
class SimSummary:
    seed: int
    duration: float
    final_infected: int
    pool_size: int
    records: int
    stage_counts: dict
    infection_curve: list

    def saturation_time(self) -> Optional[float]:
        """Simulated seconds until the whole pool was infected, if it ever was."""
        for t, n in self.infection_curve:
            if n >= self.pool_size:
                return t
        return None

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["infection_curve"] = [[t, n] for t, n in self.infection_curve]
        return obj


# event kinds
_SCAN, _LOAD, _INFECT, _C2, _BENIGN = range(5)


@dataclass
class SimState:
    config: ScenarioConfig
    rng: random.Random
    sampler: ScanSampler
    pool: frozenset
    node_states: dict
    benign_population: list
    credentials: list
    planted: dict
    clock: float = 0.0
    event_queue: list = field(default_factory=list)
    infected_count_series: list = field(default_factory=list)
    seq: int = 0

    def schedule(self, t: float, kind: int, node: str) -> None:
        heapq.heappush(self.event_queue, (t, self.seq, kind, node))
        self.seq += 1

    def infected(self) -> set:
        return {ip for ip, s in self.node_states.items() if s == INFECTED}


def _credential(rng, length):
    alphabet = string.ascii_letters + string.digits
    return "".join(rng.choice(alphabet) for _ in range(length))


def init_scenario(config: ScenarioConfig) -> SimState:
    """Validate ``config`` and build the deterministic initial world."""
    config.validate()
    rng = random.Random(config.rng_seed)
    pool = config.pool_ips()
    infra = [canonical_ip(ip) for ip in config.infrastructure.ips().values()]
    states = {ip: CLEAN for ip in pool}
    for ip in infra:
        states[ip] = INFRASTRUCTURE
    cred = config.credential_spec
    credentials = [(_credential(rng, cred.username_len), _credential(rng, cred.password_len))
                   for _ in range(cred.dictionary_size)]
    # the only place the defanged credentials exist: one entry per pool node
    planted = {ip: rng.randrange(cred.dictionary_size) for ip in pool}
    state = SimState(
        config=config,
        rng=rng,
        sampler=ScanSampler(config.allowed_networks(), config.excluded_networks(), forbidden=infra),
        pool=frozenset(pool),
        node_states=states,
        benign_population=config.benign_population(),
        credentials=credentials,
        planted=planted,
    )
    seeds = config.seed_ips()
    for ip in seeds:
        states[ip] = INFECTED
    state.infected_count_series.append((0.0, len(seeds)))
    for ip in seeds:
        state.schedule(rng.expovariate(config.scan_rate), _SCAN, ip)
        state.schedule(rng.uniform(0.0, 5.0), _C2, ip)
    b = config.benign
    if b.browse_rate + b.search_rate > 0:
        for ip in pool:
            state.schedule(rng.uniform(0.0, max(b.min_delay, 1.0) * 10), _BENIGN, ip)
    return state


class _Simulation:
    def __init__(self, state: SimState, record_sink, truth_sink):
        self.s = state
        self.cfg = state.config
        self.rng = state.rng
        self.record_sink = record_sink
        self.truth_sink = truth_sink
        self.out = []
        self.counts = {stage: 0 for stage in STAGES}
        self.emitted = 0
        infra = self.cfg.infrastructure
        self.report = (canonical_ip(infra.report_ip), infra.report_port)
        self.loader = (canonical_ip(infra.loader_ip), infra.loader_port)
        self.c2 = (canonical_ip(infra.c2_ip), infra.c2_port)
        pop = state.benign_population
        self.resolver = pop[0]
        self.search_engines = pop[1:4] if len(pop) > 4 else pop[1:2]
        self.sites = pop[4:] if len(pop) > 5 else pop[1:]

    # -- emission ----------------------------------------------------------

    def emit(self, t, stage, note, orig, resp, resp_p, proto="tcp", service=None, duration=None,
             orig_bytes=0, resp_bytes=0, conn_state="SF", history=None, orig_pkts=None, resp_pkts=None):
        if t >= self.cfg.duration:
            return
        rng = self.rng
        uid = make_uid(rng)
        if duration is not None:
            duration = round(duration, 6)
        rec = ConnRecord(
            ts=round(self.cfg.start_ts + t, 6), uid=uid, orig_h=orig, orig_p=rng.randint(32768, 60999),
            resp_h=resp, resp_p=resp_p, proto=proto, service=service, duration=duration,
            orig_bytes=orig_bytes, resp_bytes=resp_bytes, conn_state=conn_state, history=history,
            orig_pkts=orig_pkts, resp_pkts=resp_pkts,
        )
        heapq.heappush(self.out, (rec.ts, uid, rec, TruthRecord(uid, stage, orig, note)))

    def flush(self, before=None):
        out = self.out
        while out and (before is None or out[0][0] < before):
            _, _, rec, truth = heapq.heappop(out)
            try:
                self.record_sink(rec)
                self.truth_sink(truth)
            except OSError as exc:
                raise SinkFailure(f"sink write failed: {exc}") from None
            except IoFailure as exc:
                raise SinkFailure(str(exc)) from None
            self.counts[truth.stage] += 1
            self.emitted += 1

    def lognorm(self, median, sigma):
        return int(self.rng.lognormvariate(math.log(median), sigma))

    def exchange(self, t, stage, note, orig, resp, port, dur_median, ob_median, rb_median,
                 service=None, proto="tcp", sigma=0.5):
        """A completed connection; returns its duration."""
        dur = self.rng.lognormvariate(math.log(dur_median), sigma)
        ob = self.lognorm(ob_median, sigma)
        rb = self.lognorm(rb_median, sigma)
        if proto == "udp":
            self.emit(t, stage, note, orig, resp, port, proto, service, dur, ob, rb, "SF", "Dd", 1, 1)
        else:
            self.emit(t, stage, note, orig, resp, port, proto, service, dur, ob, rb, "SF", "ShADadFf",
                      4 + ob // 1400, 4 + rb // 1400)
        return dur

    # -- events --------------------------------------------------------------

    def on_scan(self, t, bot):
        s, rng = self.s, self.rng
        target = s.sampler.sample(rng, avoid=bot)
        port = s.config.scan_ports[rng.randrange(len(s.config.scan_ports))]
        state = s.node_states.get(target)
        if state == CLEAN:
            self.brute_force(t, bot, target, port)
        elif state in (PENDING, INFECTED):
            # a bot's telnet daemon is already gone
            self.emit(t, SCAN, "probe refused", bot, target, port, duration=rng.uniform(0.001, 0.05),
                      conn_state="REJ", history="Sr", orig_pkts=1, resp_pkts=1)
        elif rng.random() < s.config.dial_success_prob:
            # live telnet outside the pool: refuses the defanged credentials' probe
            self.emit(t, SCAN, "probe refused", bot, target, port, duration=rng.uniform(0.001, 0.05),
                      conn_state="REJ", history="Sr", orig_pkts=1, resp_pkts=1)
        else:
            self.emit(t, SCAN, "probe unanswered", bot, target, port, conn_state="S0",
                      history="S", orig_pkts=1, resp_pkts=0)
        s.schedule(t + rng.expovariate(s.config.scan_rate), _SCAN, bot)

    def brute_force(self, t, bot, victim, port):
        s, rng = self.s, self.rng
        s.node_states[victim] = PENDING
        self.emit(t, SCAN, "probe answered", bot, victim, port, duration=rng.uniform(0.001, 0.05),
                  conn_state="SF", history="ShAFf", orig_pkts=3, resp_pkts=2)
        order = list(range(len(s.credentials)))
        rng.shuffle(order)
        attempts = order.index(s.planted[victim]) + 1
        tt = t + rng.uniform(0.05, 0.5)
        for k in range(1, attempts + 1):
            tt += self.exchange(tt, SCAN, f"bruteforce attempt {k}/{attempts}", bot, victim, 23,
                                dur_median=2.5, ob_median=90, rb_median=220)
            tt += rng.uniform(0.1, 1.0)
        tt += self.exchange(tt, REPORT, f"report {victim}", bot, *self.report,
                            dur_median=0.15, ob_median=48, rb_median=1)
        lo, hi = s.config.loader_delay
        s.schedule(tt + rng.uniform(lo, hi), _LOAD, victim)

    def on_load(self, t, victim):
        if victim not in self.s.pool:
            raise AssertionError(f"loader asked to infect {victim}, outside the vulnerable pool")
        dur = self.exchange(t, DOWNLOAD, "binary download", victim, *self.loader, dur_median=1.5,
                            ob_median=180, rb_median=80_000, service="http", sigma=0.3)
        self.s.schedule(t + dur, _INFECT, victim)

    def on_infect(self, t, victim):
        s, rng = self.s, self.rng
        if s.node_states.get(victim) == INFECTED:
            return
        if victim not in s.pool:
            raise AssertionError(f"{victim} infected outside the vulnerable pool")
        s.node_states[victim] = INFECTED
        s.infected_count_series.append((t, s.infected_count_series[-1][1] + 1))
        s.schedule(t + rng.uniform(0.5, 3.0), _C2, victim)
        s.schedule(t + rng.expovariate(s.config.scan_rate), _SCAN, victim)

    def on_c2(self, t, bot):
        cfg, rng = self.cfg, self.rng
        dur = min(cfg.c2_refresh, cfg.duration - t) - rng.uniform(0.0, 1.0)
        if dur <= 0:
            return
        beats = max(1, int(dur // 60))
        self.emit(t, C2, "keepalive session", bot, *self.c2, duration=dur,
                  orig_bytes=beats * 2 + 16, resp_bytes=beats * 2, conn_state="SF",
                  history="ShADadFf", orig_pkts=beats + 4, resp_pkts=beats + 3)
        self.s.schedule(t + cfg.c2_refresh, _C2, bot)

    def on_benign(self, t, node):
        b, rng = self.cfg.benign, self.rng
        total = b.browse_rate + b.search_rate
        searching = rng.random() * total < b.search_rate
        tt = t
        tt += self.exchange(tt, GENERATED_BENIGN, "dns lookup", node, self.resolver, 53,
                            dur_median=0.02, ob_median=45, rb_median=140, service="dns", proto="udp")
        if searching:
            dest = rng.choice(self.search_engines)
            for _ in range(rng.randint(1, 2)):
                tt += self.exchange(tt, GENERATED_BENIGN, "search query", node, dest, 443,
                                    dur_median=1.2, ob_median=1800, rb_median=45_000, service="ssl", sigma=0.7)
        else:
            dest = rng.choice(self.sites)
            port, service = (443, "ssl") if rng.random() < 0.8 else (80, "http")
            for _ in range(rng.randint(1, 4)):
                tt += self.exchange(tt, GENERATED_BENIGN, "browse", node, dest, port,
                                    dur_median=3.0, ob_median=1200, rb_median=60_000, service=service, sigma=0.9)
                tt += rng.uniform(0.05, 0.8)
        delay = min(b.min_delay + rng.expovariate(total), b.max_delay)
        self.s.schedule(tt + delay, _BENIGN, node)

    def run(self) -> SimSummary:
        s = self.s
        handlers = {_SCAN: self.on_scan, _LOAD: self.on_load, _INFECT: self.on_infect,
                    _C2: self.on_c2, _BENIGN: self.on_benign}
        end = self.cfg.duration
        q = s.event_queue
        while q and q[0][0] < end:
            t, _, kind, node = heapq.heappop(q)
            s.clock = t
            handlers[kind](t, node)
            self.flush(before=round(self.cfg.start_ts + t, 6))
        s.clock = max(s.clock, end)
        self.flush()
        return SimSummary(
            seed=self.cfg.rng_seed,
            duration=end,
            final_infected=s.infected_count_series[-1][1],
            pool_size=len(s.pool),
            records=self.emitted,
            stage_counts=dict(self.counts),
            infection_curve=list(s.infected_count_series),
        )


def run(state: SimState, record_sink: Callable, truth_sink: Callable) -> SimSummary:
    """Process events until the clock reaches the scenario duration.

    Records reach ``record_sink`` sorted by ``(ts, uid)``; each is followed
    by its ``TruthRecord`` on ``truth_sink``.
    """
    return _Simulation(state, record_sink, truth_sink).run()


def simulate(config: ScenarioConfig) -> tuple:
    """Convenience wrapper returning ``(records, truths, summary)`` in memory."""
    records, truths = [], []
    summary = run(init_scenario(config), records.append, truths.append)
    return records, truths, summary


# ---------------------------------------------------------------- truth files

class TruthWriter:
    def __init__(self, path):
        self.path = path
        try:
            self._fh = open(path, "w", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise IoFailure(f"cannot open {path}: {exc.strerror}") from None

    def write(self, truth: TruthRecord) -> None:
        self._fh.write(truth.to_json() + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_truth(path) -> Iterator[TruthRecord]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    yield TruthRecord(obj["uid"], obj["stage"], obj["actor"], obj.get("note", ""))
    except OSError as exc:
        raise IoFailure(f"cannot read truth file {path}: {exc.strerror}") from None


def simulate_to_files(config: ScenarioConfig, log_path, truth_path, fmt: Optional[str] = None) -> SimSummary:
    with LogWriter(log_path, format=fmt) as writer, TruthWriter(truth_path) as truth:
        return run(init_scenario(config), writer.write, truth.write)


# ---------------------------------------------------------------- safety

@dataclass(frozen=True)
class Violation:
    uid: str
    rule: str
    detail: str


@dataclass
class SafetyReport:
    checked: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"checked": self.checked, "ok": self.ok,
                "violations": [asdict(v) for v in self.violations]}


class _RangeSet:
    def __init__(self, nets):
        self.ranges = _merge_overlaps(
            [(n.version, int(n.network_address), int(n.broadcast_address)) for n in nets])
        self.keys = [(v, lo) for v, lo, _ in self.ranges]

    def __contains__(self, ip) -> bool:
        addr = ipaddress.ip_address(ip)
        i = bisect.bisect_right(self.keys, (addr.version, int(addr))) - 1
        if i < 0:
            return False
        version, lo, hi = self.ranges[i]
        return version == addr.version and lo <= int(addr) <= hi


def verify_safety(records: Iterable[ConnRecord], config: ScenarioConfig,
                  truth: Optional[dict] = None) -> SafetyReport:
    """Check a generated stream against the defanging rules.

    ``truth`` maps uid to stage; without it, attack records are recognised
    by scan ports and infrastructure destinations.  At most one violation
    is reported per record.
    """
    allowed = _RangeSet(config.allowed_networks())
    excluded = _RangeSet(config.excluded_networks())
    benign = _RangeSet([config.benign_network()])
    infra = config.infrastructure
    infra_ips = {canonical_ip(ip) for ip in infra.ips().values()}
    loader = (canonical_ip(infra.loader_ip), infra.loader_port)
    pool = set(config.pool_ips())
    scan_ports = set(config.scan_ports)
    violations = []
    checked = 0
    for rec in records:
        checked += 1
        if truth is not None:
            stage = truth.get(rec.uid)
            is_attack = stage is not None and stage != GENERATED_BENIGN
            is_download = stage == DOWNLOAD
        else:
            is_attack = rec.resp_p in scan_ports or rec.resp_h in infra_ips
            is_download = (rec.resp_h, rec.resp_p) == loader
        if rec.resp_h in excluded:
            violations.append(Violation(rec.uid, "excluded-target", f"{rec.resp_h} lies in excluded_ranges"))
        elif is_attack and rec.resp_h not in infra_ips and rec.resp_h not in allowed:
            violations.append(Violation(rec.uid, "attack-target-not-allowed",
                                        f"{rec.resp_h} outside allowed_scan_ranges and infrastructure"))
        elif is_download and rec.orig_h not in pool:
            violations.append(Violation(rec.uid, "download-outside-pool",
                                        f"{rec.orig_h} is not in the vulnerable pool"))
        elif not is_attack and rec.resp_h not in benign:
            violations.append(Violation(rec.uid, "benign-target-illegal",
                                        f"{rec.resp_h} outside the synthetic benign population"))
    return SafetyReport(checked, violations)


# ---------------------------------------------------------------- merge

def _sorted_by_ts_uid(records: Iterable[ConnRecord], name: str) -> Iterator[ConnRecord]:
    """Check ts order and break equal-ts runs by uid (buffers one run)."""
    run = []
    last = None
    for rec in records:
        if last is not None and rec.ts < last:
            raise UnsortedInput(f"{name} stream is not time-sorted at uid {rec.uid}")
        if run and rec.ts != last:
            if len(run) > 1:
                run.sort(key=lambda r: r.uid)
            yield from run
            run = []
        run.append(rec)
        last = rec.ts
    if len(run) > 1:
        run.sort(key=lambda r: r.uid)
    yield from run


def merge_streams(natural: Iterable[ConnRecord], generated: Iterable[ConnRecord]) -> Iterator[ConnRecord]:
    """Merge two ts-sorted streams into one ordered by ``(ts, uid)``.

    Records are never rewritten; on a full key tie the natural record comes first.
    """
    return heapq.merge(_sorted_by_ts_uid(natural, "natural"), _sorted_by_ts_uid(generated, "generated"),
                       key=lambda r: (r.ts, r.uid))


def merge_files(natural_path, generated_path, out_path, strict: bool = False,
                fmt: Optional[str] = None) -> int:
    with LogReader(natural_path, strict=strict) as nat, LogReader(generated_path, strict=strict) as gen:
        fields = stream_fields(nat)
        have = {canonical_field(n) for n in fields}
        for name in stream_fields(gen):
            if canonical_field(name) not in have:
                fields.append(name)
        with LogWriter(out_path, format=fmt or nat.format or gen.format, fields=fields or None) as out:
            for rec in merge_streams(nat, gen):
                out.write(rec)
            return out.count
