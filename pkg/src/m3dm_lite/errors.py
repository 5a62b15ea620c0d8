"""
Exceptions raised by the m3dm_lite pipeline.

Value-type errors also derive from `ValueError` and file errors from `IOError`, so plain `except ValueError` callers
keep working.
"""


class M3DMError(Exception):
    """Base class of all pipeline errors."""


class BadArity(M3DMError, ValueError):
    """Array shapes or counts do not fit the operation."""


class BadParam(M3DMError, ValueError):
    """Scalar parameter outside its admissible range."""


class DegenerateScene(M3DMError, ValueError):
    """Scene has too few valid points to be processed."""


class EmptyData(M3DMError, ValueError):
    """Nothing to train on or to score."""


class NonFinite(M3DMError, ValueError):
    """Input contains NaN or infinite values."""


class OneClassOnly(M3DMError, ValueError):
    """Ranking metric requested with only one label class present."""


class NoAnomaly(M3DMError, ValueError):
    """Region metric requested on a set without any anomalous component."""


class ConfigError(M3DMError, ValueError):
    """Invalid pipeline configuration."""


class DataError(M3DMError, IOError):
    """Dataset or artifact missing or inconsistent."""


class FormatError(DataError):
    """Tensor file header is not recognised."""


class SizeMismatch(DataError):
    """Tensor payload length disagrees with its header."""
