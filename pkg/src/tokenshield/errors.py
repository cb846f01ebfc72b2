"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to:
2 for validation/config problems, 3 for I/O and container-format
problems, 4 for numeric failures.
"""


class TokenShieldError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(TokenShieldError):
    """Invalid parameter, malformed input value, or shape/contract mismatch."""

    exit_code = 2


class ConfigError(ValidationError):
    """Bad defense/attack configuration."""


class PlacementError(ValidationError):
    """A requested patch placement is impossible (out of bounds, overlap)."""


class ConstraintError(ValidationError):
    """A hard optimization constraint cannot be satisfied."""


class ProfileError(ValidationError):
    """Reference profile incompatible with the loaded model."""


class FormatError(TokenShieldError):
    """Corrupt, truncated, or wrong-version weight container."""

    exit_code = 3


class DataError(TokenShieldError):
    """Unreadable dataset entry or missing artifact file."""

    exit_code = 3


class NumericError(TokenShieldError):
    """Non-finite value produced where a finite one is required."""

    exit_code = 4
