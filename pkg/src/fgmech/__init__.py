"""Planar multibody kinematics and dynamics as sparse factor-graph optimization."""

from .errors import (
    BadDofChoiceError,
    ConfigurationError,
    FgmechError,
    GridMismatchError,
    InputError,
    PositionProblemDivergedError,
    RankDeficiencyError,
    SingularConfigurationError,
    SolverDivergedError,
)
from .factors import ConstrainedNoise, IsotropicNoise, Key, NoiseModel, Var
from .graph import FactorGraph, Values
from .mechanism import (
    GRAVITY_DEFAULT,
    BodyDef,
    CoordinateLayout,
    MassModel,
    MechanismDef,
    PointDef,
    RelativeCoordDef,
    build_layout,
    load_mechanism,
    pack_dofs,
    save_mechanism,
    scatter_dofs,
)
from .solver import FixedLagSmoother, LMConfig, OptResult, marginal_covariance, optimize_lm
from .system import MechanismSystem

__version__ = "0.1.0"
