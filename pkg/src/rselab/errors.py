"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code so scripted sweeps can tell failure
classes apart: usage/config -> 1, data/format -> 2, numeric -> 3.
"""


class RselabError(Exception):
    exit_code = 1


class UsageError(RselabError):
    """Bad flags, bad config keys, inconsistent arguments."""

    exit_code = 1


class ConfigurationError(UsageError):
    """Model/layer configuration that fails shape inference or validation."""

    exit_code = 1


class FormatError(RselabError):
    """Corrupt or truncated input files (checkpoints, dataset batches)."""

    exit_code = 2


class NumericError(RselabError):
    """Non-finite values produced where finiteness is required."""

    exit_code = 3
