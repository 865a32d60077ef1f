"""Exception taxonomy shared across the package.

Each class carries the process exit code the CLI maps it to, so error
category and exit status can never drift apart.
"""


class IcStressError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(IcStressError):
    """Bad configuration: shape mismatches, invalid options, unknown keys."""

    exit_code = 3


class DataIOError(IcStressError):
    """File format problems: version mismatch, truncation, checksum failure."""

    exit_code = 4


class ValidationError(IcStressError):
    """Runtime contract violations: out-of-range inputs, non-finite values,
    failed numerical checks."""

    exit_code = 5
