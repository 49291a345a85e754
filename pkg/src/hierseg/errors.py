"""Exception taxonomy used across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
environment problems (missing weights, missing optional runtime) exit 3,
data problems (missing or corrupt files) exit 4.
"""


class HiersegError(Exception):
    """Base class for all package errors."""


class ShapeError(HiersegError):
    """Array arguments have inconsistent or unexpected dimensions."""


class ValidationError(HiersegError):
    """Input values violate a documented precondition or invariant."""


class ConfigurationError(HiersegError):
    """A configuration key, enum value, or combination is invalid."""


class EnvironmentError_(HiersegError):
    """A required external resource (weights, optional runtime) is missing."""


class DataError(HiersegError):
    """A dataset file is missing, unreadable, or malformed."""
