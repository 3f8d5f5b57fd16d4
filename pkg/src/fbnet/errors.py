"""Exception taxonomy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES), so harness
scripts can tell a bad config from a numerical abort.
"""


class FbnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FbnetError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(FbnetError):
    """A configuration value or key is invalid."""


class DataError(FbnetError):
    """Dataset ingestion or file-format failure."""


class NumericError(FbnetError):
    """Non-finite values or degenerate statistics encountered."""
