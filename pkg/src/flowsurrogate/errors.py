"""Exception hierarchy shared by every subsystem.

Each class carries a short ``category`` string; the command line layer turns it
into a machine-readable error line and a distinct exit code.
"""


class FlowSurrogateError(Exception):
    category = "error"
    exit_code = 1


class DimensionError(FlowSurrogateError, ValueError):
    category = "dimension"
    exit_code = 4


class ValidityError(FlowSurrogateError, ValueError):
    """Raised when a tensor holds NaN or Inf."""

    category = "validity"
    exit_code = 5


class ConfigError(FlowSurrogateError, ValueError):
    category = "config"
    exit_code = 3


class ContractError(FlowSurrogateError, RuntimeError):
    category = "contract"
    exit_code = 6


class CorruptionError(FlowSurrogateError, ValueError):
    category = "corruption"
    exit_code = 7


class SolverError(FlowSurrogateError, RuntimeError):
    category = "solver"
    exit_code = 8


class PhysicsError(FlowSurrogateError, RuntimeError):
    category = "physics"
    exit_code = 9


class TrainingError(FlowSurrogateError, RuntimeError):
    category = "training"
    exit_code = 10


class FormatError(FlowSurrogateError, ValueError):
    """Base for container-format problems."""

    category = "format"
    exit_code = 11


class TruncatedFileError(FormatError):
    category = "truncated"
    exit_code = 12


class HashMismatchError(FormatError):
    category = "hash_mismatch"
    exit_code = 13


class VersionMismatchError(FormatError):
    category = "version_mismatch"
    exit_code = 14
