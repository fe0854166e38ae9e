from typing import Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class UnderqError(Exception):
    """Base error for the underq laboratory.

    Every error carries the process exit code the command line maps it to,
    so library callers and the CLI agree on how a failure is reported.
    """

    exit_code: int = EXIT_VALIDATION

    def __init__(
        self,
        message: Optional[str] = None,
        exit_code: Optional[int] = None,
    ):
        """Initialize the error.

        Args:
            message: Human readable description
            exit_code: Override of the class default exit code
        """
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(message)

    def __eq__(self, other) -> bool:
        """Check equality based on type, exit code and message."""
        return (
            isinstance(other, UnderqError)
            and type(other) is type(self)
            and other.exit_code == self.exit_code
            and other.message == self.message
        )

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.exit_code, self.message))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.exit_code}, {self.message!r})"


class ParameterError(UnderqError, ValueError):
    """A parameter or configuration value violates its invariant."""


class DomainError(UnderqError, ValueError):
    """The request is mathematically undefined (no finite answer exists)."""


class FormatError(UnderqError):
    """A dataset, checkpoint or config file could not be parsed."""


class ConvergenceError(UnderqError):
    """An iterative procedure exhausted its iteration budget."""

    exit_code = EXIT_NUMERICAL


class NumericalCheckError(UnderqError):
    """A verification report did not pass."""

    exit_code = EXIT_NUMERICAL
