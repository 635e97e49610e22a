"""Exception types shared across the package.

The CLI maps each family onto a process exit code, so library code should
raise the most specific class available.
"""


class SoilbenchError(Exception):
    code = "E_GENERIC"
    exit_code = 1


class ConfigError(SoilbenchError, ValueError):
    code = "E_CONFIG"
    exit_code = 2


class DataError(SoilbenchError):
    code = "E_DATA"
    exit_code = 3


class ValidationError(DataError, ValueError):
    """An annotation or record violates a data-model invariant."""

    code = "E_VALIDATION"


class ManifestError(DataError):
    code = "E_MANIFEST"


class CheckpointError(DataError):
    code = "E_CHECKPOINT"


class ShapeError(SoilbenchError, ValueError):
    code = "E_SHAPE"


class NumericalError(SoilbenchError, ArithmeticError):
    """Raised when a NaN or Inf shows up in a forward pass, loss or gradient."""

    code = "E_NUMERIC"
    exit_code = 4
