"""
How fast does a telnet worm saturate its pool?
==============================================

Each bot probes uniformly random addresses in the allowed space. With one
seed bot the expected time to infect every vulnerable host has a closed form
in terms of the harmonic numbers; here we compare it with simulated runs.

Run with ``python demos/propagation_demo.py`` (takes about a minute).
"""
import statistics

from trafficforge.botnetsim import ScenarioConfig, simulate

POOL = [f"10.0.{i // 200 + 1}.{i % 200 + 1}" for i in range(50)]
BASE = {
    "duration": 6000.0,
    "seed_bots": [POOL[0]],
    "vulnerable_pool": POOL,
    "allowed_scan_ranges": ["10.0.0.0/20"],
    "excluded_ranges": ["10.0.8.0/24"],
    "infrastructure": {
        "report_server": {"ip": "203.0.113.10"},
        "loader": {"ip": "203.0.113.11"},
        "c2_server": {"ip": "203.0.113.12"},
    },
    "scan_rate": 0.25,
    # no benign chatter, we only care about the epidemic here
    "benign": {"browse_rate": 0.0, "search_rate": 0.0},
}

# a /20 minus the excluded /24, and a bot never probes itself
space = 4096 - 256 - 1
n = len(POOL)
rate = BASE["scan_rate"]
harmonic = sum(1.0 / k for k in range(1, n))
expected = 2 * space * harmonic / (rate * n)
print(f"pool {n} hosts in a space of {space}, {rate} probes/s per bot")
print(f"expected saturation time: {expected:,.0f} s")

times = []
for seed in range(8):
    config = ScenarioConfig.from_json(dict(BASE, rng_seed=seed))
    _, _, summary = simulate(config)
    times.append(summary.saturation_time())
    print(f"  seed {seed}: saturated after {times[-1]:,.0f} s, {summary.records:,} records")

print(f"mean over {len(times)} runs: {statistics.mean(times):,.0f} s "
      f"(ratio to expected {statistics.mean(times) / expected:.2f})")

# the infection curve is the classic logistic S-shape
_, _, summary = simulate(ScenarioConfig.from_json(dict(BASE, rng_seed=0)))
print("\ninfected hosts over time (seed 0):")
step = max(1, len(summary.infection_curve) // 10)
for t, count in summary.infection_curve[::step]:
    print(f"  t={t:>8,.0f}  {'#' * count} {count}")
