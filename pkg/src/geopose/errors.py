"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, ConfigError and
DataError -> 2, NumericsError -> 3.
"""


class GeoposeError(Exception):
    """Base class for all package errors."""


class ConfigError(GeoposeError):
    """Invalid or infeasible configuration (bad beta, impossible scene, ...)."""


class DataError(GeoposeError):
    """Malformed input data (pose files, scene files, corrupted labels)."""


class NumericsError(GeoposeError):
    """Numerical failure: non-finite loss, degenerate quaternion head, ..."""
