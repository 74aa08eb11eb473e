"""Synthetic stand-in for natural enterprise traffic.

Real captures cannot ship with the package, so recreations and tests merge
generated traffic with records drawn from this model: a fixed set of
internal hosts talking to a popularity-skewed set of external servers over a
typical service mix, plus inbound background scanning.
"""
from __future__ import annotations

import bisect
import ipaddress
import math
import random
from typing import Iterable, Iterator

from .botnetsim import ScanSampler
from .logmodel import ConnRecord, make_uid

# weight, proto, port, service, duration median, orig bytes median, resp bytes median, sigma
SERVICE_MIX = (
    (0.42, "tcp", 443, "ssl", 4.0, 1500, 40_000, 1.2),
    (0.14, "tcp", 80, "http", 2.0, 600, 20_000, 1.2),
    (0.20, "udp", 53, "dns", 0.02, 45, 130, 0.4),
    (0.04, "tcp", 22, "ssh", 30.0, 3000, 4000, 1.5),
    (0.04, "udp", 123, "ntp", 0.05, 48, 48, 0.1),
    (0.03, "tcp", 25, "smtp", 1.5, 5000, 400, 1.0),
    (0.05, "tcp", 23, None, 0.0, 0, 0, 0.0),
    (0.08, "tcp", -1, None, 0.0, 0, 0, 0.0),
)
_SCANNY = frozenset({23, -1})

EXTERNAL_V4 = ("23.0.0.0/8", "34.0.0.0/7", "52.0.0.0/6", "104.16.0.0/12", "142.250.0.0/15",
               "151.101.0.0/16", "185.0.0.0/8")
INTERNAL_V6 = "2001:db8:10::/48"
EXTERNAL_V6 = "2001:db8:8000::/33"


def _hosts(sampler, rng, count):
    seen = set()
    out = []
    while len(out) < count:
        ip = sampler.sample(rng)
        if ip not in seen:
            seen.add(ip)
            out.append(ip)
    return out


def _popular(rng, hosts):
    # heavy-tailed popularity: a few servers take most connections
    idx = int(rng.paretovariate(1.1)) - 1
    return hosts[idx % len(hosts)]


def generate_natural(n: int, start_ts: float, duration: float, seed: int = 0, *,
                     internal_networks: Iterable[str] = ("10.20.0.0/16",),
                     avoid: Iterable[str] = (), avoid_networks: Iterable[str] = (),
                     ipv6_fraction: float = 0.05, internal_hosts: int = 2000,
                     external_hosts: int = 5000) -> Iterator[ConnRecord]:
    """Yield ``n`` records with timestamps uniform over the window, in ts order.

    No endpoint ever falls in ``avoid`` or ``avoid_networks``; pass the
    experiment roster there so natural traffic stays separable.
    """
    rng = random.Random(seed)
    avoid = set(avoid)
    avoid_nets = [ipaddress.ip_network(a, strict=False) for a in avoid_networks]
    internal = [ipaddress.ip_network(a, strict=False) for a in internal_networks]
    ext4 = [ipaddress.ip_network(a) for a in EXTERNAL_V4]

    def pick_hosts(nets, count):
        sampler = ScanSampler(nets, avoid_nets, forbidden=avoid)
        return _hosts(sampler, rng, min(count, max(1, sampler.total - len(avoid))))

    in4 = pick_hosts([n_ for n_ in internal if n_.version == 4] or [ipaddress.ip_network("10.20.0.0/16")],
                     internal_hosts)
    out4 = pick_hosts(ext4, external_hosts)
    in6 = pick_hosts([ipaddress.ip_network(INTERNAL_V6)], max(1, internal_hosts // 10))
    out6 = pick_hosts([ipaddress.ip_network(EXTERNAL_V6)], max(1, external_hosts // 10))

    weights = []
    total = 0.0
    for row in SERVICE_MIX:
        total += row[0]
        weights.append(total)

    t = 0.0
    for k in range(n):
        # next uniform order statistic of the remaining n - k draws
        t += (duration - t) * (1.0 - rng.random() ** (1.0 / (n - k)))
        _, proto, port, service, dmed, omed, rmed, sigma = SERVICE_MIX[
            bisect.bisect_left(weights, rng.random() * total)]
        v6 = rng.random() < ipv6_fraction
        inside = rng.choice(in6 if v6 else in4)
        outside = _popular(rng, out6 if v6 else out4)
        uid = make_uid(rng)
        ts = round(start_ts + t, 6)
        if port in _SCANNY:
            # inbound background radiation: mostly unanswered
            resp_p = port if port > 0 else rng.randint(1024, 65535)
            refused = rng.random() < 0.3
            yield ConnRecord(ts, uid, outside, rng.randint(1024, 65535), inside, resp_p, proto,
                             None, rng.uniform(0.0005, 0.05) if refused else None, 0, 0,
                             "REJ" if refused else "S0", "Sr" if refused else "S", 1, 1 if refused else 0)
            continue
        if rng.random() < 0.85:
            orig, resp = inside, outside
        else:
            orig, resp = outside, inside
        roll = rng.random()
        if roll < 0.04:
            yield ConnRecord(ts, uid, orig, rng.randint(32768, 60999), resp, port, proto, None,
                             None, 0, 0, "S0", "S" if proto == "tcp" else "D", 1, 0)
            continue
        dur = round(rng.lognormvariate(math.log(dmed), sigma), 6)
        ob = int(rng.lognormvariate(math.log(omed), sigma))
        rb = int(rng.lognormvariate(math.log(rmed), sigma))
        state = "SF" if roll < 0.95 else ("RSTO" if roll < 0.98 else "SH")
        history = "Dd" if proto == "udp" else ("ShADadFf" if state == "SF" else "ShADadR")
        yield ConnRecord(ts, uid, orig, rng.randint(32768, 60999), resp, port, proto, service, dur,
                         ob, rb, state, history, 2 + ob // 1400, 2 + rb // 1400)
