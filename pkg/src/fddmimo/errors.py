"""Exception types raised across the package."""


class FddMimoError(Exception):
    """Base class for all package errors."""


class ModelEvaluationError(FddMimoError):
    """A covariance model produced a non-finite value."""


class ContractError(FddMimoError, ValueError):
    """Inputs violate an operation's preconditions (shapes, ranges)."""


class DegenerateInputError(FddMimoError, ValueError):
    """Inputs are well-formed but the requested quantity is undefined."""


class InvalidOverheadError(FddMimoError, ValueError):
    """The uplink MAC capacity is non-positive (M * SNR_ul <= 1)."""


class InfeasibleScenarioError(FddMimoError):
    """No (tau, delta) pair satisfies the overhead constraints."""


class ConditioningError(FddMimoError):
    """A linear system in the deterministic-equivalent block is singular."""


class ConvergenceError(FddMimoError):
    """An iterative solver stopped before reaching its tolerance.

    Parameters
    ----------
    message : str
        Human readable description.
    trajectory : list of float
        Residual after each iteration.
    last : object
        Last iterate (solver specific).
    """

    def __init__(self, message, trajectory=None, last=None):
        super().__init__(message)
        self.trajectory = list(trajectory or [])
        self.last = last
