"""Reference four-bar linkage used by the simulation pipelines and tests.

Geometry: ground pivots A=(0,0) and D=(4,0); crank A-P1 of length 1 (mass 1),
coupler P1-P2 of length 2 (mass 2), rocker P2-D of length sqrt(13) (mass 4).
At crank angle 0 the closed-form assembly is P1=(1,0), P2=(1,2). Coordinates
are q = (x1, y1, x2, y2, theta) with the crank angle theta as the single
degree of freedom; the crank's inertia and gravity load are carried by the
theta slot, coupler and rocker by consistent rod blocks on the point slots.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .mechanism import (
    INERTIA_ROTATIONAL,
    INERTIA_UNIFORM_ROD,
    BodyDef,
    MechanismDef,
    PointDef,
    RelativeCoordDef,
)

A_XY = (0.0, 0.0)
D_XY = (4.0, 0.0)
L_CRANK = 1.0
L_COUPLER = 2.0
L_ROCKER = float(np.sqrt(13.0))
M_CRANK = 1.0
M_COUPLER = 2.0
M_ROCKER = 4.0


def make_four_bar() -> MechanismDef:
    return MechanismDef(
        points=(
            PointDef("A", fixed=True, xy=A_XY),
            PointDef("P1"),
            PointDef("P2"),
            PointDef("D", fixed=True, xy=D_XY),
        ),
        bodies=(
            BodyDef(("A", "P1"), L_CRANK, M_CRANK, INERTIA_ROTATIONAL),
            BodyDef(("P1", "P2"), L_COUPLER, M_COUPLER, INERTIA_UNIFORM_ROD),
            BodyDef(("P2", "D"), L_ROCKER, M_ROCKER, INERTIA_UNIFORM_ROD),
        ),
        relative_coords=(
            RelativeCoordDef("theta", attached_body=0, applied_torque_slot=True),
        ),
        dof_idxs=(4,),
    )


def assemble_four_bar(theta: float, upper: bool = True) -> np.ndarray:
    """Closed-form assembly q(theta) by intersecting the coupler/rocker circles.

    ``upper=True`` picks the branch with P2 on the positive side of the
    P1->D line (the reference configuration at theta=0 has P2=(1,2)).
    """
    p1 = np.array([np.cos(theta), np.sin(theta)]) * L_CRANK + np.asarray(A_XY)
    d = np.asarray(D_XY)
    delta = d - p1
    dist = float(np.hypot(*delta))
    if not abs(L_COUPLER - L_ROCKER) <= dist <= L_COUPLER + L_ROCKER:
        raise ConfigurationError(f"four-bar cannot assemble at theta={theta}")
    a = (dist**2 + L_COUPLER**2 - L_ROCKER**2) / (2.0 * dist)
    h = float(np.sqrt(max(L_COUPLER**2 - a**2, 0.0)))
    base = p1 + a * delta / dist
    normal = np.array([-delta[1], delta[0]]) / dist
    p2 = base + (h if upper else -h) * normal
    return np.array([p1[0], p1[1], p2[0], p2[1], theta])
