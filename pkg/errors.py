"""Exception hierarchy shared by the simulator modules and the CLI."""

from typing import Optional


class SimulatorError(Exception):
    """Base class for every error raised by the simulator."""

    exit_code = 1


class RejectedInputError(SimulatorError, ValueError):
    """An argument was malformed: non-finite values, wrong shapes, empty data."""


class InvalidModelError(SimulatorError, ValueError):
    """A model or generator request violates its validity constraints."""


class NumericFailure(SimulatorError, ArithmeticError):
    """A factorization or linear solve failed. Always fatal for the run."""


class AdversaryError(RejectedInputError):
    """Reward weights supplied by an adversary are outside the allowed range."""


class ConfigError(SimulatorError):
    """Experiment configuration could not be parsed or validated."""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantViolation(SimulatorError, AssertionError):
    """An asserted property of a run or suite did not hold."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        message = f"invariant '{invariant}' violated"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, SimulatorError):
        return error.exit_code
    return 1
