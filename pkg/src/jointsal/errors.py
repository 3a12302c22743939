"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure a user can
trigger from the command line raises one of the classes below.
"""


class JointSalError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(JointSalError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(JointSalError, ValueError):
    exit_code = 2


class ContractError(JointSalError, RuntimeError):
    """A documented precondition of a call was violated by the caller."""


class DataError(JointSalError, ValueError):
    exit_code = 3


class DecodeError(DataError):
    """A file on disk could not be parsed in its declared format."""


class MetricError(JointSalError, ValueError):
    exit_code = 3


class GenerationError(JointSalError, RuntimeError):
    exit_code = 3


class DivergenceError(JointSalError, FloatingPointError):
    exit_code = 4

    def __init__(self, step, value):
        super().__init__(f"loss diverged at step {step}: {value!r}")
        self.step = step
        self.value = value


class VersionError(JointSalError, ValueError):
    exit_code = 5
