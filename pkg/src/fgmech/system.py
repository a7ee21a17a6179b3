"""Bundle of everything evaluated per state: kinematics, mass model, forces."""

from __future__ import annotations

import numpy as np

from .constraints import MechanismKinematics
from .dynamics import (
    DepDynResult,
    IndepDynResult,
    compute_R,
    forward_accel_dep,
    forward_accel_indep,
)
from .mechanism import (
    GRAVITY_DEFAULT,
    CoordinateLayout,
    MassModel,
    MechanismDef,
    build_layout,
    scatter_dofs,
)


class MechanismSystem:
    """A mechanism compiled for repeated dynamic evaluation.

    Holds the coordinate layout, the constraint evaluator and the constant
    mass model; every method supports a leading batch dimension on states.
    """

    def __init__(self, mech: MechanismDef, g: float = GRAVITY_DEFAULT,
                 layout: CoordinateLayout | None = None):
        self.mech = mech
        self.layout = layout if layout is not None else build_layout(mech)
        self.kin = MechanismKinematics(mech, self.layout)
        self.mass = MassModel(mech, self.layout, g)

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def M(self) -> np.ndarray:
        return self.mass.M

    def force(self, q, F_ext=None):
        """Total generalized force: gravity plus an optional applied force."""
        F = self.mass.gravity(q)
        if F_ext is not None:
            F = F + F_ext
        return F

    def accel_dep(self, q, dq, F_ext=None) -> DepDynResult:
        kin = self.kin.eval(q, dq)
        return forward_accel_dep(self.mass.M, kin, self.force(q, F_ext), self.mass.M_inv)

    def accel_indep(self, q, dz, F_ext=None) -> IndepDynResult:
        """Independent-coordinate acceleration at full configuration q and dof rates dz."""
        q = np.asarray(q, dtype=float)
        kin0 = self.kin.eval(q)
        maps = compute_R(kin0, self.layout)
        dq = np.einsum("...nd,...d->...n", maps.R, np.asarray(dz, dtype=float))
        kin = self.kin.eval(q, dq)
        return forward_accel_indep(
            self.mass.M, kin, self.layout, self.force(q, F_ext), self.mass.M_inv
        )

    def accel_indep_scattered(self, q_companion, z, dz, F_ext=None) -> IndepDynResult:
        """Same, with the dof slots of the companion q overwritten by z first."""
        q = scatter_dofs(np.asarray(q_companion, dtype=float), self.layout, z)
        return self.accel_indep(q, dz, F_ext)
