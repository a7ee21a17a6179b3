"""Closed-form constrained accelerations and the position/velocity problems.

Dependent-coordinate accelerations come from eliminating the Lagrange
multipliers of the augmented system

    [ M   Phi_q^T ] [ddq]   [F]
    [ Phi_q   0   ] [lam] = [c]

via the Gamma = Phi_q M^-1 Phi_q^T kernel; independent-coordinate
accelerations project the same equation onto the nullspace basis R of Phi_q.
Everything in this module is a pure function of its inputs and supports a
leading batch dimension. Linear solves use dense factorizations: per-timestep
matrices are small (n of a few dozen at most); large-scale sparsity is the
factor-graph solver's business.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .constraints import AssembledKinematics, MechanismKinematics, assemble
from .errors import (
    BadDofChoiceError,
    FgmechError,
    PositionProblemDivergedError,
    SingularConfigurationError,
)
from .mechanism import CoordinateLayout


class DepDynResult:
    """Dependent-coordinate acceleration with multipliers and the Gamma kernel."""

    __slots__ = ("ddq", "lam", "Gamma")

    def __init__(self, ddq, lam, Gamma):
        self.ddq = ddq
        self.lam = lam
        self.Gamma = Gamma


class IndepDynResult:
    """Independent-coordinate acceleration with the projection byproducts."""

    __slots__ = ("ddz", "R", "S_times_c", "Mbar", "Qbar", "ddq")

    def __init__(self, ddz, R, S_times_c, Mbar, Qbar, ddq):
        self.ddz = ddz
        self.R = R
        self.S_times_c = S_times_c
        self.Mbar = Mbar
        self.Qbar = Qbar
        self.ddq = ddq


def _offending_pivot(phi_q):
    """Best-effort index of the constraint row that lost rank."""
    try:
        _, r, piv = scipy.linalg.qr(np.atleast_2d(phi_q).T, pivoting=True)
        diag = np.abs(np.diag(r))
        tol = max(phi_q.shape) * np.finfo(float).eps * (diag.max() if diag.size else 1.0)
        bad = np.nonzero(diag <= tol)[0]
        if bad.size:
            return int(piv[bad[0]])
        return int(piv[-1])
    except Exception:
        return None


def _chol_solve(A, rhs):
    """Batched SPD solve via Cholesky; LinAlgError signals rank loss."""
    L = np.linalg.cholesky(A)
    y = np.linalg.solve(L, rhs[..., None] if rhs.ndim == A.ndim - 1 else rhs)
    x = np.linalg.solve(np.swapaxes(L, -1, -2), y)
    return x[..., 0] if rhs.ndim == A.ndim - 1 else x


def forward_accel_dep(M, kin: AssembledKinematics, F, M_inv=None) -> DepDynResult:
    """Acceleration in dependent coordinates from mass, kinematics and forces.

    Solves the multiplier-eliminated form

        ddq = (M^-1 - M^-1 Phi_q^T Gamma^-1 Phi_q M^-1) F
              + M^-1 Phi_q^T Gamma^-1 c

    with c = -dphi_q dq taken from ``kin`` (zero when ``kin`` was evaluated
    without velocities). Supports batched ``kin``/``F``. Raises
    SingularConfigurationError when Phi_q is row-rank deficient.
    """
    M = np.asarray(M, dtype=float)
    F = np.asarray(F, dtype=float)
    if M_inv is None:
        M_inv = np.linalg.inv(M)
    phi_q = kin.phi_q
    m = phi_q.shape[-2]
    if m == 0:
        ddq = F @ M_inv
        return DepDynResult(ddq, np.zeros(F.shape[:-1] + (0,)), np.zeros((0, 0)))

    c = kin.c
    if c is None:
        c = np.zeros(phi_q.shape[:-1])
    W = phi_q @ M_inv  # rows: Phi_q M^-1
    Gamma = W @ np.swapaxes(phi_q, -1, -2)
    rhs = np.einsum("...mn,...n->...m", W, F) - c
    try:
        lam = _chol_solve(Gamma, rhs)
    except np.linalg.LinAlgError:
        piv = _offending_pivot(phi_q if phi_q.ndim == 2 else phi_q.reshape(-1, *phi_q.shape[-2:])[0])
        raise SingularConfigurationError(
            f"constraint Jacobian is row-rank deficient (offending row {piv})",
            pivot=piv,
        ) from None
    ddq = np.einsum(
        "ij,...j->...i", M_inv, F - np.einsum("...mn,...m->...n", phi_q, lam)
    )
    return DepDynResult(ddq, lam, Gamma)


def solve_kkt_accel(M, kin: AssembledKinematics, F):
    """Direct dense solve of the augmented system; returns (ddq, lam).

    Reference path used by the classical integrator and by verification
    tests; algebraically identical to :func:`forward_accel_dep`.
    """
    M = np.asarray(M, dtype=float)
    F = np.asarray(F, dtype=float)
    phi_q = kin.phi_q
    m = phi_q.shape[-2]
    n = phi_q.shape[-1]
    c = kin.c
    if c is None:
        c = np.zeros(phi_q.shape[:-1])
    batch = np.broadcast_shapes(phi_q.shape[:-2], F.shape[:-1])
    K = np.zeros(batch + (n + m, n + m))
    K[..., :n, :n] = M
    K[..., :n, n:] = np.swapaxes(phi_q, -1, -2)
    K[..., n:, :n] = phi_q
    rhs = np.concatenate(
        [np.broadcast_to(F, batch + (n,)), np.broadcast_to(c, batch + (m,))], axis=-1
    )
    try:
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise SingularConfigurationError("augmented dynamics system is singular") from None
    return sol[..., :n], sol[..., n:]


class RMaps:
    """Nullspace basis R of Phi_q plus the S map from the stacked inverse.

    Columns of ``R`` span the nullspace of Phi_q and satisfy B R = I over the
    dof selection rows B; ``S_times(w)`` maps an m-vector of constraint
    right-hand sides to the matching particular velocity/acceleration.
    """

    __slots__ = ("R", "S")

    def __init__(self, R, S):
        self.R = R
        self.S = S

    def S_times(self, w):
        return np.einsum("...nm,...m->...n", self.S, np.asarray(w, dtype=float))


def compute_R(kin: AssembledKinematics, layout: CoordinateLayout) -> RMaps:
    """Invert the stacked [Phi_q; B] system for the R and S maps.

    Requires m + d == n and a nonsingular stack; failure means the declared
    dofs cannot parameterize this configuration.
    """
    phi_q = kin.phi_q
    m, n = phi_q.shape[-2], phi_q.shape[-1]
    d = layout.d
    if m + d != n:
        raise BadDofChoiceError(
            f"need m + d == n to invert the stacked system (m={m}, d={d}, n={n})"
        )
    batch = phi_q.shape[:-2]
    K = np.zeros(batch + (n, n))
    K[..., :m, :] = phi_q
    for r, idx in enumerate(layout.dof_idxs):
        K[..., m + r, idx] = 1.0
    rhs = np.zeros((n, m + d))
    rhs[:m, :m] = np.eye(m)
    rhs[m:, m:] = np.eye(d)
    # columns 0..m-1 -> S, columns m.. -> R
    try:
        sol = np.linalg.solve(K, np.broadcast_to(rhs, batch + (n, m + d)).copy())
    except np.linalg.LinAlgError:
        raise BadDofChoiceError(
            "stacked [Phi_q; B] matrix is singular: chosen dofs cannot "
            "parameterize this configuration"
        ) from None
    return RMaps(sol[..., m:], sol[..., :m])


def forward_accel_indep(M, kin: AssembledKinematics, layout, F, M_inv=None) -> IndepDynResult:
    """Acceleration of the independent coordinates via the R projection.

    Mbar = R^T M R, Qbar = R^T (F - M S c), ddz = Mbar^-1 Qbar; the dependent
    acceleration reconstruction S c + R ddz is returned alongside.
    """
    M = np.asarray(M, dtype=float)
    F = np.asarray(F, dtype=float)
    maps = compute_R(kin, layout)
    R = maps.R
    c = kin.c
    if c is None:
        c = np.zeros(kin.phi_q.shape[:-1])
    Sc = maps.S_times(c)
    Rt = np.swapaxes(R, -1, -2)
    Mbar = Rt @ (M @ R if R.ndim == 2 else np.einsum("ij,...jd->...id", M, R))
    MSc = np.einsum("ij,...j->...i", M, Sc)
    Qbar = np.einsum("...dn,...n->...d", Rt, F - MSc)
    try:
        ddz = _chol_solve(Mbar, Qbar)
    except np.linalg.LinAlgError:
        raise FgmechError("reduced mass matrix is singular") from None
    ddq = Sc + np.einsum("...nd,...d->...n", R, ddz)
    return IndepDynResult(ddz, R, Sc, Mbar, Qbar, ddq)


def solve_velocity_problem(kin: AssembledKinematics, layout: CoordinateLayout, dz):
    """Velocities consistent with the constraints and given dof rates: dq = R dz."""
    maps = compute_R(kin, layout)
    return np.einsum("...nd,...d->...n", maps.R, np.asarray(dz, dtype=float))


def solve_position_problem(
    kin: MechanismKinematics,
    q_guess,
    locked_idxs,
    locked_values,
    tol: float = 1e-12,
    max_iter: int = 50,
    max_halvings: int = 8,
):
    """Newton-solve Phi(q) = 0 with selected coordinates locked to given values.

    Damped full Newton steps with step halving on the stacked residual norm.
    Returns the satisfying q; raises PositionProblemDivergedError when the
    iteration stalls and SingularConfigurationError on rank loss.
    """
    q = np.array(q_guess, dtype=float)
    locked_idxs = list(locked_idxs)
    locked_values = np.asarray(locked_values, dtype=float)
    n = q.shape[0]
    sel = np.zeros((len(locked_idxs), n))
    for r, idx in enumerate(locked_idxs):
        sel[r, idx] = 1.0

    def residual(qv):
        ev = kin.eval(qv)
        g = np.concatenate([ev.phi, qv[locked_idxs] - locked_values])
        J = np.concatenate([ev.phi_q, sel], axis=0)
        return g, J

    g, J = residual(q)
    norm = np.linalg.norm(g, np.inf)
    for _ in range(max_iter):
        if norm < tol:
            q[locked_idxs] = locked_values
            return q
        if J.shape[0] == J.shape[1]:
            if np.linalg.cond(J) > 1e12:
                raise SingularConfigurationError(
                    "position problem: stacked Jacobian is rank deficient",
                    pivot=_offending_pivot(J[: kin.layout.m]),
                )
            step = np.linalg.solve(J, -g)
        else:
            step, *_ = np.linalg.lstsq(J, -g, rcond=None)
        scale = 1.0
        for _ in range(max_halvings + 1):
            trial = q + scale * step
            g_t, J_t = residual(trial)
            norm_t = np.linalg.norm(g_t, np.inf)
            if norm_t < norm or norm_t < tol:
                break
            scale *= 0.5
        else:
            raise PositionProblemDivergedError(
                f"position problem: no descent after {max_halvings} halvings "
                f"(residual {norm:.3e})"
            )
        q, g, J, norm = trial, g_t, J_t, norm_t
    if norm < tol:
        q[locked_idxs] = locked_values
        return q
    raise PositionProblemDivergedError(
        f"position problem: not converged after {max_iter} iterations "
        f"(residual {norm:.3e})"
    )
