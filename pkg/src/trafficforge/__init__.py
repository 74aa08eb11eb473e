"""trafficforge: anonymize Zeek conn logs, simulate a defanged botnet
recreation inside a sandbox, and label the merged traffic by attack stage."""

__version__ = "0.1.0"

from .errors import (ConfigViolation, InvalidAddress, IoFailure, MalformedLine, PolicyGap,  # noqa: E402
                     SafetyViolationError, TrafficForgeError)
from .logmodel import ConnRecord, LogReader, LogWriter, parse_conn_line, serialize_conn  # noqa: E402
from .anonymizer import (AnonymizationPolicy, KeySet, MasterKey, anon_field, anon_ip,  # noqa: E402
                         anonymize_file, anonymize_record, derive_keyset)
from .botnetsim import ScenarioConfig, merge_streams, simulate, verify_safety  # noqa: E402
from .labeler import Label, Roster, default_mirai_ruleset, label_record, roster_from_scenario  # noqa: E402

__all__ = [
    "AnonymizationPolicy", "ConfigViolation", "ConnRecord", "InvalidAddress", "IoFailure", "KeySet",
    "Label", "LogReader", "LogWriter", "MalformedLine", "MasterKey", "PolicyGap", "Roster",
    "SafetyViolationError", "ScenarioConfig", "TrafficForgeError", "anon_field", "anon_ip",
    "anonymize_file", "anonymize_record", "default_mirai_ruleset", "derive_keyset", "label_record",
    "merge_streams", "parse_conn_line", "roster_from_scenario", "serialize_conn", "simulate",
    "verify_safety",
]
