"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class IvgenError(Exception):
    """Base class for all package errors."""


class DataError(IvgenError, ValueError):
    """Bad input data: malformed files, domain violations, empty panels."""


class ParseError(DataError):
    """Malformed file content; carries the offending line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class DomainError(DataError):
    """Value outside its mathematical domain (iv <= 0, delta outside (0,1), ...)."""


class DegenerateSpecError(DataError):
    """Transform fitting hit a degenerate statistic (zero interquantile range)."""


class NumericalError(IvgenError, RuntimeError):
    """Numerical failure: ill-posed regression, non-convergence, NaN loss."""


class IllPosedError(NumericalError):
    """Rank-deficient or badly conditioned least-squares problem."""
