"""Exception hierarchy.

Every error maps to one of three CLI exit codes through ``exit_code``:
configuration problems exit with 2, malformed or missing data with 3 and
numerical failures with 4.
"""


class DefocusError(Exception):
    exit_code = 1


class ConfigError(DefocusError, ValueError):
    exit_code = 2


class DataError(DefocusError, ValueError):
    exit_code = 3


class NumericalError(DefocusError, ArithmeticError):
    exit_code = 4


class InvalidDepthError(DataError):
    """Scene depth is not strictly positive."""


class DegenerateKernelError(DataError):
    """Aperture mask collapses to an all-zero kernel."""


class FormatError(DataError):
    """A binary file has a wrong magic, version or payload size."""


class ShapeError(ConfigError):
    """Tensor shapes are incompatible with the network graph."""


class StaleCacheError(DefocusError, RuntimeError):
    exit_code = 4


class SingularInverseError(NumericalError):
    """Unregularized inverse filter hit a vanishing transfer function."""


class SolverFailureError(NumericalError):
    """Iterative solver increased its objective."""


class TrainingAbortError(NumericalError):
    """Non-finite loss or gradient during training."""
