"""Exception hierarchy shared across the package."""


class FgmechError(Exception):
    """Base class for all errors raised by fgmech."""


class ConfigurationError(FgmechError):
    """A mechanism/layout definition is inconsistent or incomplete."""


class SingularConfigurationError(FgmechError):
    """The constraint Jacobian lost row rank at the current state.

    ``pivot`` is the index of the constraint row that became dependent
    (best effort, from a rank-revealing QR).
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class BadDofChoiceError(FgmechError):
    """The declared degrees of freedom cannot parameterize this configuration."""


class PositionProblemDivergedError(FgmechError):
    """Newton iteration on the position problem failed to converge."""


class SolverDivergedError(FgmechError):
    """Nonlinear least-squares optimization failed (damping escalated past its cap)."""

    def __init__(self, message, timestep=None, trajectory_prefix=None, stage=None):
        super().__init__(message)
        self.timestep = timestep
        self.trajectory_prefix = trajectory_prefix
        self.stage = stage


class RankDeficiencyError(FgmechError):
    """The linearized system is rank deficient.

    ``null_directions`` holds an orthonormal basis (columns) of the
    numerically null subspace, in the solver's column ordering.
    """

    def __init__(self, message, null_directions=None):
        super().__init__(message)
        self.null_directions = null_directions


class GridMismatchError(FgmechError):
    """Two trajectories do not share a common sampling grid."""


class InputError(FgmechError):
    """Malformed user input (files, CLI flags)."""
