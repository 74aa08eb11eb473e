"""
An end-to-end labeled dataset in one call
=========================================

Simulate the botnet scenario shipped next to this script, mix it with
synthetic natural traffic, anonymize everything and label each record by
attack stage. Then re-run from the manifest and check nothing changed.

Run with ``python demos/recreation_demo.py [out_dir]`` (a minute or two).
"""
import json
import sys
import tempfile
from pathlib import Path

from trafficforge.anonymizer import MasterKey
from trafficforge.pipeline import cmd_stats, run_from_manifest, run_recreation

here = Path(__file__).resolve().parent
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="trafficforge-"))
key = MasterKey.from_hex("42" * 32)

manifest = run_recreation(here / "scenario_6h.json", out / "run", key, natural_records=100_000)
print("published:", ", ".join(sorted(p.name for p in (out / "run").iterdir())))

report = json.loads((out / "run" / "label_report.json").read_text())
print(f"\n{report['total']:,} records, coverage {report['coverage']:.4%}")
for label, count in sorted(report["counts"].items(), key=lambda kv: -kv[1]):
    print(f"  {label:<17} {count:>9,}")

summary = json.loads((out / "run" / "summary.json").read_text())
print(f"\ninfected {summary['final_infected']}/{summary['pool_size']} vulnerable hosts")

# per-day volume, the same table `trafficforge stats` prints
print()
print(cmd_stats(out / "run" / "conn.labeled.log").render())

# everything needed to reproduce the run is in the manifest
again = run_from_manifest(out / "run" / "manifest.json", out / "rerun", key)
same = all((out / "run" / name).read_bytes() == (out / "rerun" / name).read_bytes()
           for name in manifest["outputs"])
print(f"\nrerun from manifest identical: {same}")
print("outputs in", out)
