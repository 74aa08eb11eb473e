"""Command-line entry point: ``trafficforge <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .anonymizer import AnonymizationPolicy, anonymize_file, derive_keyset
from .botnetsim import ScenarioConfig, merge_files, read_truth, simulate_to_files, verify_safety
from .errors import ConfigViolation, IoFailure, SafetyViolationError, TrafficForgeError
from .labeler import Roster, default_mirai_ruleset, label_stream, load_rules, roster_from_scenario
from .logmodel import JSONL, TSV, LogReader
from .pipeline import (cmd_bench_anonymize, cmd_keygen, cmd_stats, load_key, run_from_manifest,
                       run_recreation, write_json)

FORMATS = {"zeek-tsv": TSV, "tsv": TSV, "json-lines": JSONL, "jsonl": JSONL}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(2)


def _jobs(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trafficforge", description="Anonymize, simulate, merge and label Zeek conn logs.")
    p.add_argument("--version", action="version", version=f"trafficforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("keygen", help="write a fresh 256-bit master key")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="overwrite an existing key file")

    s = sub.add_parser("anonymize", help="apply an anonymization policy to a conn log")
    s.add_argument("--key", help="key file (default: $TRAFFICFORGE_KEY)")
    s.add_argument("--policy")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strict", action="store_true")
    s.add_argument("--jobs", type=_jobs, default=os.cpu_count() or 1)
    s.add_argument("--format", choices=sorted(FORMATS))

    s = sub.add_parser("simulate", help="run a botnet recreation scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--start-ts", type=float)
    s.add_argument("--format", choices=sorted(FORMATS), default="zeek-tsv")
    s.add_argument("--gzip", action="store_true")
    s.add_argument("--key", help="also write an anonymized roster with this key")

    s = sub.add_parser("merge", help="merge natural and generated traffic by (ts, uid)")
    s.add_argument("--natural", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strict", action="store_true")

    s = sub.add_parser("label", help="label records by attack stage")
    s.add_argument("--roster", required=True)
    s.add_argument("--rules")
    s.add_argument("--truth")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--strict", action="store_true")

    s = sub.add_parser("stats", help="per-day volume and connection counts")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--json", help="also write the stats as JSON here")
    s.add_argument("--strict", action="store_true")

    s = sub.add_parser("run-recreation", help="simulate, merge, anonymize and label end to end")
    s.add_argument("--scenario")
    nat = s.add_mutually_exclusive_group()
    nat.add_argument("--natural", help="natural traffic log")
    nat.add_argument("--natural-synthetic", type=int, metavar="N", help="generate N natural records")
    s.add_argument("--natural-seed", type=int)
    s.add_argument("--key")
    s.add_argument("--policy")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--start-ts", type=float)
    s.add_argument("--format", choices=sorted(FORMATS), default="zeek-tsv")
    s.add_argument("--gzip", action="store_true")
    s.add_argument("--jobs", type=_jobs, default=1)
    s.add_argument("--strict", action="store_true")
    s.add_argument("--manifest", help="re-execute the run recorded in this manifest")

    s = sub.add_parser("bench", help="anonymization throughput and memory report")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--key")
    s.add_argument("--policy")
    s.add_argument("--jobs", type=_jobs)
    s.add_argument("--out", help="write the report JSON here")
    return p


def _policy(path):
    return AnonymizationPolicy.load(path) if path else AnonymizationPolicy.default()


def _emit(obj, path=None):
    if path:
        write_json(path, obj)
    print(json.dumps(obj, indent=2, sort_keys=True))


def _keygen(a):
    cmd_keygen(a.out, force=a.force)
    print(f"wrote key to {a.out}")


def _anonymize(a):
    policy = _policy(a.policy)
    keys = derive_keyset(load_key(a.key), policy.classes)
    res = anonymize_file(a.inp, a.out, policy, keys, strict=a.strict, jobs=a.jobs,
                         out_format=FORMATS.get(a.format))
    print(f"anonymized {res.records} records ({res.skipped} skipped) in {res.seconds:.2f}s")


def _simulate(a):
    config = ScenarioConfig.load(a.scenario)
    if a.seed is not None:
        config.rng_seed = a.seed
    if a.start_ts is not None:
        config.start_ts = a.start_ts
    config.validate()
    fmt = FORMATS[a.format]
    os.makedirs(a.out, exist_ok=True)
    log = os.path.join(a.out, ("conn.jsonl" if fmt == JSONL else "conn.log") + (".gz" if a.gzip else ""))
    truth = os.path.join(a.out, "truth.jsonl")
    summary = simulate_to_files(config, log, truth, fmt)
    write_json(os.path.join(a.out, "summary.json"), summary.to_json())
    write_json(os.path.join(a.out, "roster.json"), roster_from_scenario(config).to_json())
    if a.key:
        policy = AnonymizationPolicy.default()
        keys = derive_keyset(load_key(a.key), policy.classes)
        write_json(os.path.join(a.out, "roster.anon.json"), roster_from_scenario(config, keys).to_json())
    stages = {t.uid: t.stage for t in read_truth(truth)}
    with LogReader(log, strict=True) as reader:
        safety = verify_safety(reader, config, stages)
    write_json(os.path.join(a.out, "safety.json"), safety.to_json())
    if not safety.ok:
        raise SafetyViolationError(f"{len(safety.violations)} safety violations, see safety.json")
    print(f"simulated {summary.records} records, {summary.final_infected}/{summary.pool_size} infected")


def _merge(a):
    n = merge_files(a.natural, a.generated, a.out, strict=a.strict)
    print(f"merged {n} records")


def _label(a):
    roster = Roster.load(a.roster)
    rules = load_rules(a.rules, roster) if a.rules else default_mirai_ruleset(roster)
    report = label_stream(a.inp, a.out, rules, truth=a.truth, strict=a.strict)
    write_json(a.report, report.to_json())
    print(f"labeled {report.total} records, coverage {report.coverage:.4%}")


def _stats(a):
    stats = cmd_stats(a.inp, strict=a.strict)
    if a.json:
        write_json(a.json, stats.to_json())
    print(stats.render())


def _run_recreation(a):
    key = load_key(a.key)
    if a.manifest:
        manifest = run_from_manifest(a.manifest, a.out, key, jobs=a.jobs)
    else:
        if not a.scenario:
            raise ConfigViolation("--scenario is required unless --manifest is given")
        manifest = run_recreation(a.scenario, a.out, key, policy_path=a.policy, natural_path=a.natural,
                                  natural_records=a.natural_synthetic or 0, natural_seed=a.natural_seed,
                                  seed=a.seed, start_ts=a.start_ts, fmt=FORMATS[a.format],
                                  compress=a.gzip, jobs=a.jobs, strict=a.strict)
    print(f"published {len(manifest['outputs']) + 1} files to {a.out}")


def _bench(a):
    report = cmd_bench_anonymize(a.inp, load_key(a.key), _policy(a.policy), jobs=a.jobs)
    _emit(report, a.out)


COMMANDS = {
    "keygen": _keygen, "anonymize": _anonymize, "simulate": _simulate, "merge": _merge,
    "label": _label, "stats": _stats, "run-recreation": _run_recreation, "bench": _bench,
}


def _fail(exc):
    msg = " ".join(str(exc).split())
    print(f"error: {exc.category}: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except TrafficForgeError as exc:
        _fail(exc)
        return exc.exit_code
    except OSError as exc:
        err = IoFailure(f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "))
        _fail(err)
        return err.exit_code
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
