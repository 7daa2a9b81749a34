"""Exception hierarchy shared across the package.

Each branch maps to a process exit code so the CLI can translate
failures without inspecting messages: configuration problems exit 2,
data/schema problems exit 3, numerical failures exit 4.
"""


class ReleaseLiftError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ReleaseLiftError):
    """Invalid or contradictory run configuration."""

    exit_code = 2


class DataError(ReleaseLiftError):
    """Input data violates the panel contract."""

    exit_code = 3


class SchemaError(DataError):
    """Malformed rows, headers, or field values in input files."""


class NumericalError(ReleaseLiftError):
    """A numerical routine failed beyond recovery (non-SPD matrix,
    divergent variance, undefined ratio)."""

    exit_code = 4


class SpdError(NumericalError):
    """A matrix required to be symmetric positive definite is not,
    even after the jitter ladder."""


class IdentifiabilityError(NumericalError):
    """A design matrix is rank deficient where a proper posterior
    requires full rank."""
