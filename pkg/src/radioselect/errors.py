"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (usage 2, data 3, dependency 4), so
library code should raise the most specific class that applies.
"""


class RadioselectError(Exception):
    """Base class for all package errors."""


class UsageError(RadioselectError):
    """API misuse: mismatched lengths, non-scalar loss, unset calibration."""


class ConfigurationError(RadioselectError):
    """Invalid or non-composing network/run configuration."""


class InputError(RadioselectError):
    """Malformed or out-of-contract data handed to an operation."""


class ParseError(InputError):
    """Unreadable on-disk artifact (bad magic, dtype, header...)."""


class DegenerateDataError(InputError):
    """Data that makes the requested statistic undefined (one class, zero variance)."""


class DependencyError(RadioselectError):
    """A required upstream artifact is missing (e.g. infer before train)."""


class EnvironmentError_(RadioselectError):
    """A required external tool or resource is unavailable."""
