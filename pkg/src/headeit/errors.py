"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, NumericalError -> 3,
FormatError and OSError -> 4.
"""


class HeadEITError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(HeadEITError):
    """Invalid configuration, precondition or provenance mismatch."""


class NumericalError(HeadEITError):
    """A numerical procedure failed at runtime."""


class LayerNestingError(NumericalError):
    """Two anatomical layers cross for the requested shape coefficients."""


class RetryCapError(NumericalError):
    """Rejection sampling exceeded its retry cap."""


class DeformationError(NumericalError):
    """Mesh deformation produced an invalid (inverted or overlapping) mesh."""


class SolverError(NumericalError):
    """Linear solver failure, reported with matrix diagnostics."""


class TrainingError(NumericalError):
    """Error-statistics training failed (too many rejected samples)."""


class EigenIterationError(NumericalError):
    """Eigenvalue iteration did not converge within its cap."""


class FormatError(HeadEITError):
    """Malformed or inconsistent artifact file."""
