"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raise the most specific
one that applies.
"""


class StageDiffError(Exception):
    """Base class for package errors."""


class ConfigError(StageDiffError):
    """Invalid configuration: bad hyperparameters, illegal flags, mismatched manifests."""


class DataError(StageDiffError):
    """Problems with input data: missing files, unparsable cells, too-short series."""


class NumericsError(StageDiffError):
    """Non-finite values or a diverging computation; message carries the step context."""
