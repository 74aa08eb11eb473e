"""Heuristic per-connection attack-stage labels.

Labels come from the experiment roster (which IPs are vulnerable nodes,
seeds and infrastructure) plus destination ports.  They work on anonymized
logs as long as the roster went through the same key.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

from .anonymizer import KeySet, anon_ip
from .botnetsim import ScenarioConfig, read_truth
from .errors import IoFailure, RosterInvalid, TruthMismatch
from .logmodel import ConnRecord, LogReader, LogWriter, canonical_ip

LABEL_FIELD = "attack_stage"


class Label(str, Enum):
    NATURAL = "NATURAL"
    SCAN = "SCAN"
    REPORT = "REPORT"
    DOWNLOAD = "DOWNLOAD"
    C2 = "C2"
    GENERATED_BENIGN = "GENERATED_BENIGN"
    UNLABELED = "UNLABELED"


ATTACK_STAGES = (Label.SCAN, Label.REPORT, Label.DOWNLOAD, Label.C2)

POOL, SEED, REPORT, LOADER, C2, BENIGN = "pool", "seed", "report", "loader", "c2", "benign"
ROLES = frozenset({POOL, SEED, REPORT, LOADER, C2, BENIGN})
ROSTER_ROLES = frozenset({POOL, SEED, REPORT, LOADER, C2})
_NO_ROLES = frozenset()


@dataclass(frozen=True)
class Roster:
    """Experiment IP inventory.

    ``pool_ips`` may contain the seeds (they are vulnerable nodes too); every
    other pair of role sets must be disjoint.
    """

    pool_ips: frozenset = frozenset()
    seed_ips: frozenset = frozenset()
    infrastructure: dict = field(default_factory=dict)
    ports: dict = field(default_factory=lambda: {REPORT: 48101, LOADER: 80, C2: 23})
    scan_ports: tuple = (23, 2323)
    benign_synthetic: frozenset = frozenset()

    def __post_init__(self):
        try:
            pool = frozenset(canonical_ip(ip) for ip in self.pool_ips)
            seeds = frozenset(canonical_ip(ip) for ip in self.seed_ips)
            infra = {role: canonical_ip(ip) for role, ip in self.infrastructure.items()}
            benign = frozenset(canonical_ip(ip) for ip in self.benign_synthetic)
        except ValueError as exc:
            raise RosterInvalid(str(exc)) from None
        unknown = set(infra) - {REPORT, LOADER, C2}
        if unknown:
            raise RosterInvalid(f"unknown infrastructure roles {sorted(unknown)}")
        object.__setattr__(self, "pool_ips", pool)
        object.__setattr__(self, "seed_ips", seeds)
        object.__setattr__(self, "infrastructure", infra)
        object.__setattr__(self, "benign_synthetic", benign)
        object.__setattr__(self, "ports", {**{REPORT: 48101, LOADER: 80, C2: 23}, **self.ports})
        object.__setattr__(self, "scan_ports", tuple(self.scan_ports))

        experiment = pool | seeds
        groups = [("pool/seeds", experiment), ("benign_synthetic", benign)]
        groups += [(role, frozenset({ip})) for role, ip in infra.items()]
        for i, (name_a, a) in enumerate(groups):
            for name_b, b in groups[i + 1:]:
                if a & b:
                    raise RosterInvalid(f"roster roles {name_a} and {name_b} overlap")
        roles = {}
        for ip in pool:
            roles.setdefault(ip, set()).add(POOL)
        for ip in seeds:
            roles.setdefault(ip, set()).add(SEED)
        for role, ip in infra.items():
            roles.setdefault(ip, set()).add(role)
        for ip in benign:
            roles.setdefault(ip, set()).add(BENIGN)
        object.__setattr__(self, "_roles", {ip: frozenset(r) for ip, r in roles.items()})

    def roles_of(self, ip: str) -> frozenset:
        return self._roles.get(ip, _NO_ROLES)

    @classmethod
    def from_json(cls, obj: dict) -> "Roster":
        if not isinstance(obj, dict):
            raise RosterInvalid("roster must be a JSON object")
        infra = obj.get("infrastructure", {})
        ips = {}
        ports = {}
        for role, entry in infra.items():
            if isinstance(entry, dict):
                ips[role] = entry["ip"]
                if "port" in entry:
                    ports[role] = int(entry["port"])
            else:
                ips[role] = entry
        return cls(
            pool_ips=frozenset(obj.get("pool", ())),
            seed_ips=frozenset(obj.get("seeds", ())),
            infrastructure=ips,
            ports=ports,
            scan_ports=tuple(obj.get("scan_ports", (23, 2323))),
            benign_synthetic=frozenset(obj.get("benign_synthetic", ())),
        )

    @classmethod
    def load(cls, path) -> "Roster":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_json(json.load(fh))
        except OSError as exc:
            raise IoFailure(f"cannot read roster {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise RosterInvalid(f"roster {path} is not valid JSON: {exc.msg}") from None

    def to_json(self) -> dict:
        return {
            "pool": sorted(self.pool_ips),
            "seeds": sorted(self.seed_ips),
            "infrastructure": {role: {"ip": ip, "port": self.ports[role]}
                               for role, ip in sorted(self.infrastructure.items())},
            "scan_ports": list(self.scan_ports),
            "benign_synthetic": sorted(self.benign_synthetic),
        }


@dataclass(frozen=True)
class LabelRule:
    """One heuristic.  Unset conditions match anything.

    ``either_roles`` needs at least one endpoint with one of the roles,
    ``neither_roles`` needs both endpoints to have none of them.
    """

    priority: int
    label: Label
    roster: Roster = field(repr=False, compare=False, default_factory=Roster)
    orig_roles: Optional[frozenset] = None
    resp_roles: Optional[frozenset] = None
    either_roles: Optional[frozenset] = None
    neither_roles: Optional[frozenset] = None
    resp_ports: Optional[frozenset] = None
    protos: Optional[frozenset] = None

    def matches(self, rec: ConnRecord) -> bool:
        if self.resp_ports is not None and rec.resp_p not in self.resp_ports:
            return False
        if self.protos is not None and rec.proto not in self.protos:
            return False
        orig = self.roster.roles_of(rec.orig_h)
        resp = self.roster.roles_of(rec.resp_h)
        if self.orig_roles is not None and not orig & self.orig_roles:
            return False
        if self.resp_roles is not None and not resp & self.resp_roles:
            return False
        if self.either_roles is not None and not (orig | resp) & self.either_roles:
            return False
        if self.neither_roles is not None and (orig | resp) & self.neither_roles:
            return False
        return True

    def to_json(self) -> dict:
        obj = {"priority": self.priority, "label": self.label.value}
        for name in ("orig_roles", "resp_roles", "either_roles", "neither_roles", "resp_ports", "protos"):
            value = getattr(self, name)
            if value is not None:
                obj[name] = sorted(value)
        return obj


def _check_rules(rules):
    rules = sorted(rules, key=lambda r: r.priority)
    priorities = [r.priority for r in rules]
    if len(set(priorities)) != len(priorities):
        raise RosterInvalid("rule priorities must be unique")
    return rules


def default_mirai_ruleset(roster: Roster) -> list:
    """The Mirai heuristics, in priority order.

    Port 23 is shared by scanning and C2, so destination role is checked
    before originator role.
    """
    p = roster.ports
    experiment = frozenset({POOL, SEED})
    return _check_rules([
        LabelRule(1, Label.NATURAL, roster, neither_roles=ROSTER_ROLES),
        LabelRule(2, Label.C2, roster, resp_roles=frozenset({C2}), resp_ports=frozenset({p[C2]})),
        LabelRule(3, Label.REPORT, roster, resp_roles=frozenset({REPORT}), resp_ports=frozenset({p[REPORT]})),
        LabelRule(4, Label.DOWNLOAD, roster, resp_roles=frozenset({LOADER}), resp_ports=frozenset({p[LOADER]}),
                  orig_roles=frozenset({POOL})),
        LabelRule(5, Label.SCAN, roster, orig_roles=experiment, resp_ports=frozenset(roster.scan_ports)),
        LabelRule(6, Label.GENERATED_BENIGN, roster, either_roles=experiment),
        LabelRule(7, Label.UNLABELED, roster),
    ])


def rules_from_json(obj: list, roster: Roster) -> list:
    """Build a ruleset from its JSON form (a list of rule objects)."""
    if not isinstance(obj, list) or not obj:
        raise RosterInvalid("ruleset must be a non-empty JSON list")
    rules = []
    for item in obj:
        try:
            kwargs = {"priority": int(item["priority"]), "label": Label(item["label"])}
        except (KeyError, ValueError, TypeError) as exc:
            raise RosterInvalid(f"bad rule {item!r}: {exc}") from None
        for name in ("orig_roles", "resp_roles", "either_roles", "neither_roles"):
            if name in item:
                roles = frozenset(item[name])
                if roles - ROLES:
                    raise RosterInvalid(f"unknown roles {sorted(roles - ROLES)}")
                kwargs[name] = roles
        if "resp_ports" in item:
            kwargs["resp_ports"] = frozenset(int(x) for x in item["resp_ports"])
        if "protos" in item:
            kwargs["protos"] = frozenset(item["protos"])
        rules.append(LabelRule(roster=roster, **kwargs))
    return _check_rules(rules)


def load_rules(path, roster: Roster) -> list:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return rules_from_json(json.load(fh), roster)
    except OSError as exc:
        raise IoFailure(f"cannot read rules {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise RosterInvalid(f"rules {path} are not valid JSON: {exc.msg}") from None


def swap_priorities(rules: list, a: int, b: int) -> list:
    """Ruleset with the priorities of rules ``a`` and ``b`` exchanged."""
    out = []
    for r in rules:
        if r.priority == a:
            r = replace(r, priority=b)
        elif r.priority == b:
            r = replace(r, priority=a)
        out.append(r)
    return _check_rules(out)


def label_record(record: ConnRecord, rules: list) -> Label:
    for rule in rules:
        if rule.matches(record):
            return rule.label
    return Label.UNLABELED


# ---------------------------------------------------------------- streams

@dataclass
class LabelReport:
    total: int = 0
    counts: dict = field(default_factory=lambda: {lab.value: 0 for lab in Label})
    skipped: int = 0
    confusion: Optional[dict] = None

    @property
    def coverage(self) -> float:
        if self.total == 0:
            return 1.0
        return 1.0 - self.counts[Label.UNLABELED.value] / self.total

    def stage_errors(self) -> int:
        """Records whose truth is an attack stage but got another label."""
        if self.confusion is None:
            return 0
        return sum(n for label, row in self.confusion.items() for truth, n in row.items()
                   if truth in {s.value for s in ATTACK_STAGES} and label != truth)

    def precision_recall(self) -> dict:
        if self.confusion is None:
            return {}
        out = {}
        for stage in (*ATTACK_STAGES, Label.GENERATED_BENIGN, Label.NATURAL):
            s = stage.value
            tp = self.confusion.get(s, {}).get(s, 0)
            predicted = sum(self.confusion.get(s, {}).values())
            actual = sum(row.get(s, 0) for row in self.confusion.values())
            out[s] = {
                "precision": tp / predicted if predicted else None,
                "recall": tp / actual if actual else None,
                "support": actual,
            }
        return out

    def to_json(self) -> dict:
        obj = {"total": self.total, "skipped": self.skipped, "coverage": self.coverage,
               "counts": dict(self.counts)}
        if self.confusion is not None:
            obj["confusion"] = {k: dict(sorted(v.items())) for k, v in sorted(self.confusion.items())}
            obj["stage_errors"] = self.stage_errors()
            obj["per_stage"] = self.precision_recall()
        return obj


def _load_truth(truth) -> dict:
    if truth is None:
        return None
    if isinstance(truth, dict):
        return dict(truth)
    return {t.uid: t.stage for t in read_truth(truth)}


def label_records(records: Iterable[ConnRecord], rules: list, truth: Optional[dict] = None,
                  report: Optional[LabelReport] = None):
    """Yield ``(record, label)`` while accumulating ``report``.

    Truth entries are consumed as they match; whatever remains afterwards
    has no record.
    """
    report = report if report is not None else LabelReport()
    counts = report.counts
    if truth is not None and report.confusion is None:
        report.confusion = {}
    for rec in records:
        label = label_record(rec, rules)
        counts[label.value] += 1
        report.total += 1
        if truth is not None:
            stage = truth.pop(rec.uid, Label.NATURAL.value)
            row = report.confusion.setdefault(label.value, {})
            row[stage] = row.get(stage, 0) + 1
        yield rec, label


def label_stream(in_path, out_path, rules: list, truth=None, strict: bool = False) -> LabelReport:
    """Append an ``attack_stage`` column to every record of ``in_path``.

    ``truth`` is a truth sidecar path or a uid -> stage mapping; when given,
    the report carries a confusion matrix of heuristic label vs. truth stage
    (records without truth count as NATURAL).
    """
    truth_map = _load_truth(truth)
    report = LabelReport()
    with LogReader(in_path, strict=strict) as reader:
        fields = [f for f in (reader.fields or []) if f != LABEL_FIELD] + [LABEL_FIELD]
        with LogWriter(out_path, format=reader.format, fields=fields) as writer:
            for rec, label in label_records(reader, rules, truth_map, report):
                rec.extras[LABEL_FIELD] = label.value
                writer.write(rec)
        report.skipped = reader.skipped
    if truth_map:
        some = next(iter(truth_map))
        raise TruthMismatch(f"{len(truth_map)} truth records have no matching connection (e.g. uid {some})")
    return report


def roster_from_scenario(config: ScenarioConfig, keys: Optional[KeySet] = None) -> Roster:
    """Roster of the scenario's IPs, passed through ``anon_ip`` when ``keys`` is given."""
    config.validate()
    conv = (lambda ip: anon_ip(ip, keys)) if keys is not None else canonical_ip
    infra = config.infrastructure
    return Roster(
        pool_ips=frozenset(conv(ip) for ip in config.pool_ips()),
        seed_ips=frozenset(conv(ip) for ip in config.seed_ips()),
        infrastructure={REPORT: conv(infra.report_ip), LOADER: conv(infra.loader_ip), C2: conv(infra.c2_ip)},
        ports={REPORT: infra.report_port, LOADER: infra.loader_port, C2: infra.c2_port},
        scan_ports=tuple(config.scan_ports),
        benign_synthetic=frozenset(conv(ip) for ip in config.benign_population()),
    )
