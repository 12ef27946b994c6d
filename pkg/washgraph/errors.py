"""Exception hierarchy; each family carries the CLI exit code it maps to."""
from __future__ import annotations


class WashGraphError(Exception):
    exit_code = 1


class ConfigError(WashGraphError):
    exit_code = 2


class InputNotFoundError(ConfigError):
    def __init__(self, path: object):
        super().__init__(f"Input file not found: {path}")
        self.path = path


class InvalidSpecError(ConfigError):
    pass


class IngestError(WashGraphError):
    exit_code = 3


class SchemaMismatchError(IngestError):
    pass


class MalformedRowError(IngestError):
    def __init__(self, line_no: int | None, reason: str):
        super().__init__(reason if line_no is None else f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateTradeError(IngestError):
    pass


class OutputError(WashGraphError):
    exit_code = 4


class MismatchedInputsError(WashGraphError):
    pass


class ZeroMarketVolumeError(WashGraphError):
    pass


class CoverageGapError(WashGraphError):
    pass


class OutOfRangeError(ValueError):
    pass


class UnknownNodeError(KeyError):
    pass
