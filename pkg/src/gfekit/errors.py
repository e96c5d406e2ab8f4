"""Exception types shared across the toolkit.

Every error raised by the package derives from GfekitError so callers
(and the CLI) can distinguish toolkit failures from programming errors.
"""


class GfekitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(GfekitError):
    """A delimited input file could not be parsed.

    Carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(GfekitError):
    """Two rows share the same (unit, period) pair."""


class SchemaError(GfekitError):
    """A declared column or regressor name does not resolve."""


class EmptyInputError(GfekitError):
    """An operation received an empty panel or table."""


class DomainError(GfekitError):
    """An argument is outside the mathematical domain of the operation."""


class PreconditionError(GfekitError):
    """A documented precondition of an operation is violated."""


class SingularDesignError(GfekitError):
    """The regressor matrix is rank deficient.

    ``columns`` names a minimal linearly dependent set when it could be
    identified.
    """

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        if self.columns:
            message = f"{message} (dependent set: {', '.join(self.columns)})"
        super().__init__(message)


class NoWithinVariationError(GfekitError):
    """A regressor is constant within every unit, so the within
    transformation annihilates it."""

    def __init__(self, column):
        self.column = column
        super().__init__(
            f"regressor '{column}' has no within-unit variation"
        )


class SpecError(GfekitError):
    """A generator or run configuration is internally inconsistent."""


class SolverError(GfekitError):
    """The dynamic-programming solver failed at a grid point."""


class ConfigError(GfekitError):
    """A run configuration file is malformed or incomplete."""
