"""Exception hierarchy shared across the package.

User-facing errors (bad input, bad config, malformed files) derive from
:class:`UserError` so the CLI can map them to exit code 1.
"""


class UserError(Exception):
    """Base class for errors caused by user input rather than a bug."""


class DimensionError(UserError, ValueError):
    pass


class UsageError(UserError, ValueError):
    pass


class GraphError(UserError, ValueError):
    """Inconsistent graph structure (indices out of range, bad edge types)."""


class SpecError(UserError, ValueError):
    """Malformed graph-spec file."""

    def __init__(self, message, line_no=None, line=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
            if line is not None:
                message = f"{message} ({line.strip()!r})"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(UserError, ValueError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required."""
