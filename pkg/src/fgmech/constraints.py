"""Per-constraint building blocks and whole-mechanism kinematic evaluation.

Each block contributes one scalar row to the constraint vector and exposes,
at a given state, the five objects every constraint factor is built from:

  phi               the constraint value
  phi_q             its gradient row (sparse: fixed per-kind index pattern)
  dphi_q            the time derivative of phi_q along the supplied velocity
  phiqq_times_v     directional derivative of phi_q in a supplied direction v
  dotphiqq_times_v  directional derivative of dphi_q in a supplied direction v

Second-derivative tensors are never materialized; only their products with
vectors are exposed. All evaluators accept a leading batch dimension on the
state vectors. Rows of fixed points are dropped from the patterns; their
coordinates enter as constants and their velocities as zeros.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .mechanism import CoordinateLayout, MechanismDef

# Branch threshold for the absolute-angle block: use the x-projection
# equation when |sin(theta)| exceeds this, the y-projection otherwise.
_ANGLE_BRANCH_THRESHOLD = 1.0 / np.sqrt(2.0)

KIND_DISTANCE = "constant-distance"
KIND_FIXED_SLIDER = "fixed-pinned-slider"
KIND_MOBILE_SLIDER = "mobile-pinned-slider"
KIND_ANGLE = "absolute-angle"


class BlockEval:
    """Evaluation of one constraint block at a state (optionally batched).

    ``cols`` is the block's fixed sparse index pattern; the ``*_vals`` arrays
    are aligned with it. Derivative rows are None when the corresponding
    input vector was not supplied.
    """

    __slots__ = ("cols", "phi", "phi_q_vals", "dphi_q_vals", "phiqq_v_vals",
                 "dotphiqq_v_vals", "branch")

    def __init__(self, cols, phi, phi_q_vals, dphi_q_vals=None,
                 phiqq_v_vals=None, dotphiqq_v_vals=None, branch=None):
        self.cols = cols
        self.phi = phi
        self.phi_q_vals = phi_q_vals
        self.dphi_q_vals = dphi_q_vals
        self.phiqq_v_vals = phiqq_v_vals
        self.dotphiqq_v_vals = dotphiqq_v_vals
        self.branch = branch

    def dense_row(self, n, which="phi_q"):
        vals = getattr(self, which + "_vals")
        row = np.zeros(np.shape(vals)[:-1] + (n,))
        row[..., self.cols] = vals
        return row


class ConstraintBlock:
    """Base class: a single scalar constraint row over a few q slots.

    ``local`` lists the block's local coordinates in canonical order as
    (q_index, constant) pairs; mobile slots carry the q index and fixed
    slots carry the constant coordinate.
    """

    kind: str

    def __init__(self, local):
        self.local = tuple(local)
        self.cols = np.array([i for i, _ in self.local if i is not None], dtype=int)
        self._active = np.array(
            [k for k, (i, _) in enumerate(self.local) if i is not None], dtype=int
        )

    def key(self):
        return (self.kind, tuple(int(c) for c in self.cols), self._param_key())

    def _param_key(self):
        return ()

    def _pos(self, q):
        """Gather local positions (..., k_full) from q plus fixed constants."""
        shape = np.shape(q)[:-1]
        out = np.empty(shape + (len(self.local),))
        for k, (idx, const) in enumerate(self.local):
            out[..., k] = q[..., idx] if idx is not None else const
        return out

    def _vel(self, v):
        """Gather local values of a tangent vector; fixed slots are zero."""
        shape = np.shape(v)[:-1]
        out = np.zeros(shape + (len(self.local),))
        for k, (idx, _) in enumerate(self.local):
            if idx is not None:
                out[..., k] = v[..., idx]
        return out

    def _select(self, full):
        return None if full is None else full[..., self._active]

    def eval(self, q, dq=None, v_phiqq=None, v_dotphiqq=None) -> BlockEval:
        q = np.asarray(q, dtype=float)
        x = self._pos(q)
        xd = self._vel(np.asarray(dq, dtype=float)) if dq is not None else None
        vp = self._vel(np.asarray(v_phiqq, dtype=float)) if v_phiqq is not None else None
        vd = self._vel(np.asarray(v_dotphiqq, dtype=float)) if v_dotphiqq is not None else None
        phi, row, drow, pv, dv, branch = self._formulas(x, xd, vp, vd)
        return BlockEval(
            self.cols, phi, self._select(row), self._select(drow),
            self._select(pv), self._select(dv), branch,
        )

    def _formulas(self, x, xd, vp, vd):
        raise NotImplementedError


class ConstantDistanceBlock(ConstraintBlock):
    """Fixed distance L between two points: the rigid-body primitive.

    Local order (xi, yi, xj, yj); phi = (xj-xi)^2 + (yj-yi)^2 - L^2.
    """

    kind = KIND_DISTANCE

    def __init__(self, local, length):
        super().__init__(local)
        if length <= 0:
            raise ConfigurationError("constant-distance requires L > 0")
        self.length = float(length)

    def _param_key(self):
        return (self.length,)

    @staticmethod
    def _pattern(d):
        # (d over local diffs) -> row [-dx, -dy, dx, dy] * 2
        return 2.0 * np.stack([-d[..., 0], -d[..., 1], d[..., 0], d[..., 1]], axis=-1)

    def _formulas(self, x, xd, vp, vd):
        dx = x[..., 2] - x[..., 0]
        dy = x[..., 3] - x[..., 1]
        phi = dx * dx + dy * dy - self.length**2
        row = self._pattern(np.stack([dx, dy], axis=-1))

        def diff_pattern(v):
            if v is None:
                return None
            d = np.stack([v[..., 2] - v[..., 0], v[..., 3] - v[..., 1]], axis=-1)
            return self._pattern(d)

        drow = diff_pattern(xd)
        pv = diff_pattern(vp)
        dv = np.zeros_like(row) if vd is not None else None  # constant Hessian
        return phi, row, drow, pv, dv, None


class FixedPinnedSliderBlock(ConstraintBlock):
    """Point P constrained to the line through two fixed points A, B.

    Local order (x, y); the Jacobian row is constant.
    """

    kind = KIND_FIXED_SLIDER

    def __init__(self, local, line_a, line_b):
        super().__init__(local)
        self.line_a = (float(line_a[0]), float(line_a[1]))
        self.line_b = (float(line_b[0]), float(line_b[1]))

    def _param_key(self):
        return (self.line_a, self.line_b)

    def _formulas(self, x, xd, vp, vd):
        xa, ya = self.line_a
        xb, yb = self.line_b
        ex, ey = xb - xa, yb - ya
        phi = ex * (x[..., 1] - ya) - ey * (x[..., 0] - xa)
        row = np.broadcast_to(np.array([-ey, ex]), x.shape[:-1] + (2,)).copy()
        zeros = np.zeros_like(row)
        drow = zeros if xd is not None else None
        pv = zeros if vp is not None else None
        dv = zeros if vd is not None else None
        return phi, row, drow, pv, dv, None


class MobilePinnedSliderBlock(ConstraintBlock):
    """Point P constrained to the line through two mobile points Pi, Pj.

    Local order (x, y, xi, yi, xj, yj);
    phi = (xj-xi)(y-yi) - (yj-yi)(x-xi).
    """

    kind = KIND_MOBILE_SLIDER

    @staticmethod
    def _row_of(a):
        return np.stack(
            [
                a[..., 3] - a[..., 5],  # yi - yj
                a[..., 4] - a[..., 2],  # xj - xi
                a[..., 5] - a[..., 1],  # yj - y
                a[..., 0] - a[..., 4],  # x - xj
                a[..., 1] - a[..., 3],  # y - yi
                a[..., 2] - a[..., 0],  # xi - x
            ],
            axis=-1,
        )

    def _formulas(self, x, xd, vp, vd):
        phi = (x[..., 4] - x[..., 2]) * (x[..., 1] - x[..., 3]) - (
            x[..., 5] - x[..., 3]
        ) * (x[..., 0] - x[..., 2])
        row = self._row_of(x)
        drow = self._row_of(xd) if xd is not None else None
        pv = self._row_of(vp) if vp is not None else None
        dv = np.zeros_like(row) if vd is not None else None  # constant Hessian
        return phi, row, drow, pv, dv, None


class AbsoluteAngleBlock(ConstraintBlock):
    """Ties the angle coordinate of a link of length L to its endpoints.

    Local order (xi, yi, xj, yj, theta). Two interchangeable equations avoid
    degeneracy: the x-projection form when |sin(theta)| > 1/sqrt(2) (branch 1)
    and the y-projection form otherwise (branch 2); the selected branch always
    has |d(phi)/d(theta)| >= L/sqrt(2). Selection is recomputed from the
    current theta at every evaluation.
    """

    kind = KIND_ANGLE

    def __init__(self, local, length):
        super().__init__(local)
        if length <= 0:
            raise ConfigurationError("absolute-angle requires L > 0")
        self.length = float(length)

    def _param_key(self):
        return (self.length,)

    def _formulas(self, x, xd, vp, vd):
        L = self.length
        th = x[..., 4]
        s, c = np.sin(th), np.cos(th)
        use1 = np.abs(s) > _ANGLE_BRANCH_THRESHOLD

        phi = np.where(use1, x[..., 2] - x[..., 0] - L * c, x[..., 3] - x[..., 1] - L * s)
        shape = th.shape
        row = np.empty(shape + (5,))
        row[..., 0] = np.where(use1, -1.0, 0.0)
        row[..., 1] = np.where(use1, 0.0, -1.0)
        row[..., 2] = np.where(use1, 1.0, 0.0)
        row[..., 3] = np.where(use1, 0.0, 1.0)
        row[..., 4] = np.where(use1, L * s, -L * c)

        def theta_only(val):
            out = np.zeros(shape + (5,))
            out[..., 4] = val
            return out

        drow = pv = dv = None
        if xd is not None:
            thd = xd[..., 4]
            drow = theta_only(np.where(use1, L * thd * c, L * thd * s))
        if vp is not None:
            pv = theta_only(np.where(use1, L * c, L * s) * vp[..., 4])
        if vd is not None:
            thd = 0.0 if xd is None else xd[..., 4]
            dv = theta_only(np.where(use1, -L * thd * s, L * thd * c) * vd[..., 4])
        return phi, row, drow, pv, dv, np.where(use1, 1, 2)


class AssembledKinematics:
    """Stacked constraint evaluation for a whole mechanism at one state.

    Arrays carry any leading batch shape of the inputs: ``phi`` is (..., m),
    the matrices are (..., m, n). ``b`` (velocity right-hand side) is zero
    because no constraint in scope depends explicitly on time; ``c`` is the
    acceleration right-hand side -dphi_q @ dq (None when dq wasn't supplied).
    """

    __slots__ = ("layout", "blocks", "phi", "phi_q", "dphi_q",
                 "phiqq_v", "dotphiqq_v", "c")

    def __init__(self, layout, blocks, phi, phi_q, dphi_q, phiqq_v, dotphiqq_v, c):
        self.layout = layout
        self.blocks = blocks
        self.phi = phi
        self.phi_q = phi_q
        self.dphi_q = dphi_q
        self.phiqq_v = phiqq_v
        self.dotphiqq_v = dotphiqq_v
        self.c = c

    @property
    def m(self):
        return len(self.blocks)

    @property
    def b(self):
        return np.zeros(self.phi.shape)

    def row_entries(self, k, which="phi_q"):
        """Sparse (cols, vals) pair of row k of the requested matrix."""
        block = self.blocks[k]
        mat = getattr(self, {"phi_q": "phi_q", "dphi_q": "dphi_q",
                             "phiqq_v": "phiqq_v", "dotphiqq_v": "dotphiqq_v"}[which])
        return block.cols, mat[..., k, block.cols]


def assemble(
    blocks,
    layout: CoordinateLayout,
    q,
    dq=None,
    v_acc=None,
    v_vel=None,
) -> AssembledKinematics:
    """Stack all block rows at a state into an AssembledKinematics.

    ``v_acc`` feeds the phi_qq product rows and ``v_vel`` the dot-phi_qq
    product rows. Rows appear in block declaration order; duplicated blocks
    are a configuration error.
    """
    seen = set()
    for b in blocks:
        k = b.key()
        if k in seen:
            raise ConfigurationError(f"duplicated constraint block {k}")
        seen.add(k)

    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    n, m = layout.n, len(blocks)
    phi = np.zeros(batch + (m,))
    phi_q = np.zeros(batch + (m, n))
    dphi_q = np.zeros(batch + (m, n)) if dq is not None else None
    phiqq_v = np.zeros(batch + (m, n)) if v_acc is not None else None
    dotphiqq_v = np.zeros(batch + (m, n)) if v_vel is not None else None

    for k, block in enumerate(blocks):
        ev = block.eval(q, dq, v_acc, v_dotphiqq=v_vel)
        phi[..., k] = ev.phi
        phi_q[..., k, block.cols] = ev.phi_q_vals
        if dphi_q is not None:
            dphi_q[..., k, block.cols] = ev.dphi_q_vals
        if phiqq_v is not None:
            phiqq_v[..., k, block.cols] = ev.phiqq_v_vals
        if dotphiqq_v is not None:
            dotphiqq_v[..., k, block.cols] = ev.dotphiqq_v_vals

    c = None
    if dq is not None:
        dq = np.asarray(dq, dtype=float)
        c = -np.einsum("...mn,...n->...m", dphi_q, dq)
    return AssembledKinematics(layout, tuple(blocks), phi, phi_q, dphi_q,
                               phiqq_v, dotphiqq_v, c)


def eval_block(block: ConstraintBlock, q, dq=None, v_phiqq=None, v_dotphiqq=None) -> BlockEval:
    """Evaluate a single block; convenience wrapper over ``block.eval``."""
    return block.eval(q, dq, v_phiqq, v_dotphiqq)


# ---------------------------------------------------------------------------
# Building blocks from a mechanism definition
# ---------------------------------------------------------------------------


def _point_local(mech: MechanismDef, layout: CoordinateLayout, pid: str):
    p = mech.point(pid)
    if p.fixed:
        return [(None, p.xy[0]), (None, p.xy[1])]
    ix, iy = layout.point_slots[pid]
    return [(ix, 0.0), (iy, 0.0)]


def _distance_block(mech, layout, pid_a, pid_b, length):
    local = _point_local(mech, layout, pid_a) + _point_local(mech, layout, pid_b)
    return ConstantDistanceBlock(local, length)


def _angle_block(mech, layout, rc):
    body = mech.bodies[rc.attached_body]
    local = (
        _point_local(mech, layout, body.endpoints[0])
        + _point_local(mech, layout, body.endpoints[1])
        + [(layout.rel_slots[rc.id], 0.0)]
    )
    return AbsoluteAngleBlock(local, body.length)


def _explicit_block(mech, layout, spec: dict) -> ConstraintBlock:
    kind = spec.get("kind")
    if kind == KIND_DISTANCE:
        a, b = spec["points"]
        return _distance_block(mech, layout, a, b, float(spec["length"]))
    if kind == KIND_FIXED_SLIDER:
        local = _point_local(mech, layout, spec["point"])
        return FixedPinnedSliderBlock(local, spec["line"][0], spec["line"][1])
    if kind == KIND_MOBILE_SLIDER:
        pi, pj = spec["line_points"]
        local = (
            _point_local(mech, layout, spec["point"])
            + _point_local(mech, layout, pi)
            + _point_local(mech, layout, pj)
        )
        return MobilePinnedSliderBlock(local)
    if kind == KIND_ANGLE:
        for rc in mech.relative_coords:
            if rc.id == spec["rel_coord"]:
                return _angle_block(mech, layout, rc)
        raise ConfigurationError(f"unknown relative coordinate {spec['rel_coord']!r}")
    raise ConfigurationError(f"unknown constraint kind {kind!r}")


def build_constraint_blocks(mech: MechanismDef, layout: CoordinateLayout):
    """Constraint rows for a mechanism, in deterministic order.

    Constant-distance blocks are auto-generated, one per body with at least
    one mobile endpoint (body order), followed by one absolute-angle block per
    relative coordinate, followed by explicit constraints. An explicit entry
    that restates an auto-generated block is dropped.
    """
    blocks: list[ConstraintBlock] = []
    for body in mech.bodies:
        if all(mech.point(pid).fixed for pid in body.endpoints):
            continue
        blocks.append(_distance_block(mech, layout, *body.endpoints, body.length))
    for rc in mech.relative_coords:
        blocks.append(_angle_block(mech, layout, rc))
    auto_keys = {b.key() for b in blocks}
    for spec in mech.extra_constraints:
        block = _explicit_block(mech, layout, spec)
        if block.key() in auto_keys:
            continue
        blocks.append(block)
    return blocks


def count_constraints(mech: MechanismDef) -> int:
    """Number of scalar constraint rows the mechanism generates."""
    slots: dict[str, tuple[int, int]] = {}
    k = 0
    for p in mech.points:
        if not p.fixed:
            slots[p.id] = (k, k + 1)
            k += 2
    rel_slots = {rc.id: k + i for i, rc in enumerate(mech.relative_coords)}
    provisional = CoordinateLayout(
        n=k + len(mech.relative_coords), m=0, point_slots=slots,
        rel_slots=rel_slots, dof_idxs=(),
    )
    return len(build_constraint_blocks(mech, provisional))


class MechanismKinematics:
    """Compiled constraint evaluator bound to one mechanism and layout."""

    def __init__(self, mech: MechanismDef, layout: CoordinateLayout | None = None):
        self.mech = mech
        self.layout = layout if layout is not None else _layout_of(mech)
        self.blocks = build_constraint_blocks(mech, self.layout)
        if len(self.blocks) != self.layout.m:
            raise ConfigurationError(
                f"layout expects m={self.layout.m} constraints, built {len(self.blocks)}"
            )

    def eval(self, q, dq=None, v_acc=None, v_vel=None) -> AssembledKinematics:
        return assemble(self.blocks, self.layout, q, dq, v_acc, v_vel)

    def phi(self, q):
        return self.eval(q).phi

    def phi_q(self, q):
        return self.eval(q).phi_q


def _layout_of(mech: MechanismDef) -> CoordinateLayout:
    from .mechanism import build_layout

    return build_layout(mech)
