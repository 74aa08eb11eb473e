"""Exception hierarchy shared by every stage.

Each error carries a short machine-readable ``category`` and the process exit
code the CLI should use when it escapes a subcommand.
"""


class TrafficForgeError(Exception):
    category = "error"
    exit_code = 1


class ConfigViolation(TrafficForgeError):
    category = "config"
    exit_code = 3


class PolicyGap(ConfigViolation):
    category = "policy-gap"


class UnknownClass(ConfigViolation):
    category = "unknown-class"


class RosterInvalid(ConfigViolation):
    category = "roster"


class SafetyViolationError(TrafficForgeError):
    category = "safety"
    exit_code = 4


class IoFailure(TrafficForgeError):
    category = "io"
    exit_code = 5


class SinkFailure(IoFailure):
    category = "sink"


class MalformedLine(IoFailure):
    category = "malformed"

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class UnknownFormat(IoFailure):
    category = "format"


class UnsortedInput(IoFailure):
    category = "unsorted"


class TruthMismatch(IoFailure):
    category = "truth-mismatch"


class InvalidAddress(TrafficForgeError, ValueError):
    category = "address"
    exit_code = 5
