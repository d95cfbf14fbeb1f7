"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class MplPrefError(Exception):
    """Base class for package errors."""


class NoIndifferencePoint(MplPrefError):
    pass


class DegenerateRow(MplPrefError):
    pass


class IncompleteProfile(MplPrefError):
    pass


class UnsupportedCurvature(MplPrefError):
    pass


class NonFiniteUtility(MplPrefError):
    pass


class DesignMismatch(MplPrefError):
    pass


class InfeasibleParameters(MplPrefError):
    """Raised when a respondent's implied parameters leave the model domain.

    ``respondent`` and ``parameter`` identify the first offending entry.
    """

    def __init__(self, message: str, respondent=None, parameter: str | None = None):
        super().__init__(message)
        self.respondent = respondent
        self.parameter = parameter


class InfeasibleInit(MplPrefError):
    pass


class SingularHessian(MplPrefError):
    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(message)
        self.condition = condition


class RankDeficient(MplPrefError):
    pass


class ReferentialError(MplPrefError):
    pass


class ParseError(MplPrefError):
    """Malformed input row; carries the file path and 1-based line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line


class GradientFailure(MplPrefError):
    """Objective not finite at the finite-difference points even after shrinking the step."""
