"""Exception types shared across the package.

Each class carries a short machine-parsable ``code`` used by the CLI to pick
its exit status and error line.
"""


class PpgageError(Exception):
    code = "ERROR"
    exit_code = 1


class InvalidInputError(PpgageError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""

    code = "INVALID_INPUT"
    exit_code = 2


class MissingArtifactError(PpgageError, FileNotFoundError):
    """A pipeline stage requires a file produced by an earlier stage."""

    code = "MISSING_ARTIFACT"
    exit_code = 3


class NumericError(PpgageError, RuntimeError):
    """A numeric routine failed in a way that invalidates its output."""

    code = "NUMERIC_FAILURE"
    exit_code = 4


class NoEventsError(NumericError):
    """Survival fit requested on data without any observed events."""

    code = "NO_EVENTS"


class CollinearityError(NumericError):
    """Design matrix is rank deficient; coefficients are not identifiable."""

    code = "COLLINEAR_COVARIATES"


class UndefinedStatisticError(NumericError):
    """Requested statistic is undefined for the given data."""

    code = "UNDEFINED_STATISTIC"
