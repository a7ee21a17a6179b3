"""Residual factors over keyed state variables, with analytic Jacobians.

Every factor exposes a raw error vector and one Jacobian block per connected
variable, in key order; the solver applies the noise-model whitening. Factor
evaluation is pure, so factors may be evaluated concurrently and same-kind
factors can be evaluated in one vectorized batch (the ``batch_*`` class
methods; the scalar path simply runs a batch of one).

Dynamics factors differentiate their acceleration map numerically (central
differences, per-coordinate step 1e-6 * max(1, |x|)); the block with respect
to the connected acceleration variable is exactly -I.
"""

from __future__ import annotations

import enum
from typing import NamedTuple

import numpy as np

from .mechanism import pack_dofs
from .system import MechanismSystem

# Surrogate variance used to realize "zero covariance" (hard constraint) rows.
CONSTRAINED_EPS = 1e-10

FD_STEP_SCALE = 1e-6


class Var(enum.IntEnum):
    """Variable families; enum order fixes the solver's column ordering."""

    q = 0
    dq = 1
    ddq = 2
    z = 3
    dz = 4
    ddz = 5
    Q = 6


class Key(NamedTuple):
    """A variable node: family plus timestep."""

    kind: Var
    t: int

    def __repr__(self):
        return f"{self.kind.name}{self.t}"


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------


class NoiseModel:
    """Diagonal Gaussian noise; whitening scales rows by 1/sigma."""

    form = "diagonal"

    def __init__(self, variances):
        v = np.atleast_1d(np.asarray(variances, dtype=float))
        if np.any(v <= 0.0):
            raise ValueError("variances must be positive")
        self.variances = v
        self.sqrt_info = 1.0 / np.sqrt(v)

    @property
    def dim(self):
        return self.variances.shape[0]

    def cost(self, e):
        w = self.sqrt_info * e
        return 0.5 * float(w @ w)

    def whiten(self, e, jacobians=None):
        ew = self.sqrt_info * e
        if jacobians is None:
            return ew
        return ew, [None if J is None else self.sqrt_info[:, None] * J for J in jacobians]


class IsotropicNoise(NoiseModel):
    """Same variance on every row."""

    form = "isotropic-sigma"

    def __init__(self, variance, dim):
        super().__init__(np.full(dim, float(variance)))


class ConstrainedNoise(NoiseModel):
    """Hard-constraint rows realized with a tiny surrogate variance."""

    form = "constrained"

    def __init__(self, dim, eps=CONSTRAINED_EPS):
        super().__init__(np.full(dim, float(eps)))


# ---------------------------------------------------------------------------
# Factor base
# ---------------------------------------------------------------------------


class Factor:
    """A residual over a small set of variables plus a noise model."""

    kind: str = "factor"
    jacobian_is_constant = False  # True when J never depends on the values

    def __init__(self, keys, dim, noise):
        self.keys = tuple(keys)
        self.dim = int(dim)
        self.noise = noise
        if noise.dim != self.dim:
            raise ValueError(f"{self.kind}: noise dim {noise.dim} != error dim {self.dim}")

    def group_key(self):
        """Factors with equal group keys may be evaluated in one batch."""
        return None

    def error(self, values) -> np.ndarray:
        return type(self).batch_error([self], values)[0]

    def error_and_jacobians(self, values):
        E, Js = type(self).batch_error_and_jacobians([self], values)
        return E[0], [None if J is None else J[0] for J in Js]

    # Batch API: subclasses implement these; default falls back to scalar
    # methods only if the subclass overrides the scalar ones instead.
    @classmethod
    def batch_error(cls, factors, values) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        raise NotImplementedError


def _stack(factors, values, pos):
    return np.stack([np.asarray(values[f.keys[pos]], dtype=float) for f in factors])


# ---------------------------------------------------------------------------
# Prior / integrator / equality factors
# ---------------------------------------------------------------------------


class PriorFactor(Factor):
    """Pins a variable (or selected slots of it) to a desired value."""

    kind = "prior"
    jacobian_is_constant = True

    def __init__(self, key, x0, noise, idxs=None, var_dim=None):
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.idxs = None if idxs is None else tuple(int(i) for i in idxs)
        dim = len(self.x0)
        if self.idxs is not None and len(self.idxs) != dim:
            raise ValueError("prior: len(idxs) must match len(x0)")
        self.var_dim = int(var_dim) if var_dim is not None else (
            dim if self.idxs is None else max(self.idxs) + 1
        )
        super().__init__((key,), dim, noise)
        J = np.eye(self.var_dim)[list(self.idxs), :] if self.idxs is not None \
            else np.eye(dim)
        self._J = J

    def group_key(self):
        return (self.kind, self.dim, self.var_dim, self.idxs)

    @classmethod
    def batch_error(cls, factors, values):
        X = _stack(factors, values, 0)
        if factors[0].idxs is not None:
            X = X[:, list(factors[0].idxs)]
        X0 = np.stack([f.x0 for f in factors])
        return X - X0

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        E = cls.batch_error(factors, values)
        J = np.broadcast_to(factors[0]._J, (len(factors),) + factors[0]._J.shape)
        return E, [J]


class EulerIntegratorFactor(Factor):
    """Explicit first-order integration: x_{t+1} = x_t + dt * dx_t."""

    kind = "euler-integrator"
    jacobian_is_constant = True

    def __init__(self, x_t, x_t1, dx_t, dt, noise, dim=None):
        self.dt = float(dt)
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")
        dim = int(dim) if dim is not None else noise.dim
        super().__init__((x_t, x_t1, dx_t), dim, noise)
        eye = np.eye(dim)
        self._Js = (-eye, eye, -self.dt * eye)

    def group_key(self):
        return (self.kind, self.dim, self.dt)

    @classmethod
    def batch_error(cls, factors, values):
        x0 = _stack(factors, values, 0)
        x1 = _stack(factors, values, 1)
        dx0 = _stack(factors, values, 2)
        return x1 - x0 - factors[0].dt * dx0

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        E = cls.batch_error(factors, values)
        B = len(factors)
        return E, [np.broadcast_to(J, (B,) + J.shape) for J in factors[0]._Js]


class TrapezoidalIntegratorFactor(Factor):
    """Trapezoidal integration: x_{t+1} = x_t + dt/2 (dx_t + dx_{t+1}).

    When the derivative at the left end is known data rather than a variable
    (the very first step of a forward run, where the initial acceleration
    follows from the known initial state), pass it as ``dx_t_value`` and the
    factor connects only three variables.
    """

    kind = "trapezoidal-integrator"
    jacobian_is_constant = True

    def __init__(self, x_t, x_t1, dx_t, dx_t1, dt, noise, dim=None, dx_t_value=None):
        self.dt = float(dt)
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")
        dim = int(dim) if dim is not None else noise.dim
        self.dx_t_value = None if dx_t_value is None else np.asarray(dx_t_value, dtype=float)
        eye = np.eye(dim)
        half = 0.5 * self.dt * eye
        if self.dx_t_value is None:
            keys = (x_t, x_t1, dx_t, dx_t1)
            self._Js = (-eye, eye, -half, -half)
        else:
            if dx_t is not None:
                raise ValueError("pass either a dx_t key or dx_t_value, not both")
            keys = (x_t, x_t1, dx_t1)
            self._Js = (-eye, eye, -half)
        super().__init__(keys, dim, noise)

    def group_key(self):
        return (self.kind, self.dim, self.dt, self.dx_t_value is None)

    @classmethod
    def batch_error(cls, factors, values):
        f0 = factors[0]
        x0 = _stack(factors, values, 0)
        x1 = _stack(factors, values, 1)
        if f0.dx_t_value is None:
            dx0 = _stack(factors, values, 2)
            dx1 = _stack(factors, values, 3)
        else:
            dx0 = np.stack([f.dx_t_value for f in factors])
            dx1 = _stack(factors, values, 2)
        return x1 - x0 - 0.5 * f0.dt * (dx0 + dx1)

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        E = cls.batch_error(factors, values)
        B = len(factors)
        return E, [np.broadcast_to(J, (B,) + J.shape) for J in factors[0]._Js]


class SoftEqualityFactor(Factor):
    """Soft equality between consecutive state vectors (branch disambiguation)."""

    kind = "soft-equality"
    jacobian_is_constant = True

    def __init__(self, x_t, x_t1, noise, dim=None):
        dim = int(dim) if dim is not None else noise.dim
        super().__init__((x_t, x_t1), dim, noise)
        eye = np.eye(dim)
        self._Js = (-eye, eye)

    def group_key(self):
        return (self.kind, self.dim)

    @classmethod
    def batch_error(cls, factors, values):
        return _stack(factors, values, 1) - _stack(factors, values, 0)

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        E = cls.batch_error(factors, values)
        B = len(factors)
        return E, [np.broadcast_to(J, (B,) + J.shape) for J in factors[0]._Js]


# ---------------------------------------------------------------------------
# Constraint factors (dependent coordinates)
# ---------------------------------------------------------------------------


class PositionConstraintFactor(Factor):
    """Keeps q on the constraint manifold: e = Phi(q)."""

    kind = "position-constraint"

    def __init__(self, q_key, system: MechanismSystem, noise):
        self.system = system
        super().__init__((q_key,), system.layout.m, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def batch_error(cls, factors, values):
        qs = _stack(factors, values, 0)
        return factors[0].system.kin.eval(qs).phi

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        qs = _stack(factors, values, 0)
        ev = factors[0].system.kin.eval(qs)
        return ev.phi, [ev.phi_q]


class VelocityConstraintFactor(Factor):
    """Keeps dq tangent to the manifold: e = Phi_q(q) dq."""

    kind = "velocity-constraint"

    def __init__(self, q_key, dq_key, system: MechanismSystem, noise):
        self.system = system
        super().__init__((q_key, dq_key), system.layout.m, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def batch_error(cls, factors, values):
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ev = factors[0].system.kin.eval(qs)
        return np.einsum("...mn,...n->...m", ev.phi_q, dqs)

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ev = factors[0].system.kin.eval(qs, dqs)
        e = np.einsum("...mn,...n->...m", ev.phi_q, dqs)
        # d(Phi_q dq)/dq is the dphi_q matrix evaluated along dq
        return e, [ev.dphi_q, ev.phi_q]


# ---------------------------------------------------------------------------
# Constraint factors (independent coordinates)
# ---------------------------------------------------------------------------


def _selection_rows(idxs, n):
    sel = np.zeros((len(idxs), n))
    for r, i in enumerate(idxs):
        sel[r, i] = 1.0
    return sel


class DofPositionFactor(Factor):
    """Couples q to its dof sub-vector z: e = [Phi(q); q({idxs}) - z]."""

    kind = "dof-position-constraint"

    def __init__(self, q_key, z_key, system: MechanismSystem, noise):
        self.system = system
        layout = system.layout
        super().__init__((q_key, z_key), layout.m + layout.d, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def _eval(cls, factors, values, with_jac):
        sys0 = factors[0].system
        layout = sys0.layout
        qs = _stack(factors, values, 0)
        zs = _stack(factors, values, 1)
        ev = sys0.kin.eval(qs)
        e = np.concatenate([ev.phi, pack_dofs(qs, layout) - zs], axis=-1)
        if not with_jac:
            return e
        B, d, n, m = len(factors), layout.d, layout.n, layout.m
        sel = np.broadcast_to(_selection_rows(layout.dof_idxs, n), (B, d, n))
        Jq = np.concatenate([ev.phi_q, sel], axis=-2)
        Jz = np.broadcast_to(
            np.concatenate([np.zeros((m, d)), -np.eye(d)], axis=0), (B, m + d, d)
        )
        return e, [Jq, Jz]

    @classmethod
    def batch_error(cls, factors, values):
        return cls._eval(factors, values, False)

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        return cls._eval(factors, values, True)


class DofVelocityFactor(Factor):
    """Couples dq to dz on the velocity manifold: e = [Phi_q dq; dq({idxs}) - dz]."""

    kind = "dof-velocity-constraint"

    def __init__(self, q_key, dq_key, dz_key, system: MechanismSystem, noise):
        self.system = system
        layout = system.layout
        super().__init__((q_key, dq_key, dz_key), layout.m + layout.d, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def _eval(cls, factors, values, with_jac):
        sys0 = factors[0].system
        layout = sys0.layout
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        dzs = _stack(factors, values, 2)
        ev = sys0.kin.eval(qs, dqs if with_jac else None)
        e = np.concatenate(
            [
                np.einsum("...mn,...n->...m", ev.phi_q, dqs),
                pack_dofs(dqs, layout) - dzs,
            ],
            axis=-1,
        )
        if not with_jac:
            return e
        B, d, n, m = len(factors), layout.d, layout.n, layout.m
        zeros_dn = np.zeros((B, d, n))
        Jq = np.concatenate([ev.dphi_q, zeros_dn], axis=-2)
        sel = np.broadcast_to(_selection_rows(layout.dof_idxs, n), (B, d, n))
        Jdq = np.concatenate([ev.phi_q, sel], axis=-2)
        Jdz = np.broadcast_to(
            np.concatenate([np.zeros((m, d)), -np.eye(d)], axis=0), (B, m + d, d)
        )
        return e, [Jq, Jdq, Jdz]

    @classmethod
    def batch_error(cls, factors, values):
        return cls._eval(factors, values, False)

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        return cls._eval(factors, values, True)


class DofAccelerationFactor(Factor):
    """Acceleration-level constraint coupling ddq to ddz.

    e = [dphi_q dq + Phi_q ddq; ddq({idxs}) - ddz]; the q-block of the
    Jacobian stacks both second-derivative tensor products.
    """

    kind = "dof-acceleration-constraint"

    def __init__(self, q_key, dq_key, ddq_key, ddz_key, system: MechanismSystem, noise):
        self.system = system
        layout = system.layout
        super().__init__((q_key, dq_key, ddq_key, ddz_key), layout.m + layout.d, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def _eval(cls, factors, values, with_jac):
        sys0 = factors[0].system
        layout = sys0.layout
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ddqs = _stack(factors, values, 2)
        ddzs = _stack(factors, values, 3)
        ev = sys0.kin.eval(qs, dqs, v_acc=ddqs if with_jac else None,
                           v_vel=dqs if with_jac else None)
        e = np.concatenate(
            [
                np.einsum("...mn,...n->...m", ev.dphi_q, dqs)
                + np.einsum("...mn,...n->...m", ev.phi_q, ddqs),
                pack_dofs(ddqs, layout) - ddzs,
            ],
            axis=-1,
        )
        if not with_jac:
            return e
        B, d, n, m = len(factors), layout.d, layout.n, layout.m
        zeros_dn = np.zeros((B, d, n))
        Jq = np.concatenate([ev.dotphiqq_v + ev.phiqq_v, zeros_dn], axis=-2)
        Jdq = np.concatenate([2.0 * ev.dphi_q, zeros_dn], axis=-2)
        sel = np.broadcast_to(_selection_rows(layout.dof_idxs, n), (B, d, n))
        Jddq = np.concatenate([ev.phi_q, sel], axis=-2)
        Jddz = np.broadcast_to(
            np.concatenate([np.zeros((m, d)), -np.eye(d)], axis=0), (B, m + d, d)
        )
        return e, [Jq, Jdq, Jddq, Jddz]

    @classmethod
    def batch_error(cls, factors, values):
        return cls._eval(factors, values, False)

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        return cls._eval(factors, values, True)


# ---------------------------------------------------------------------------
# Dynamics factors
# ---------------------------------------------------------------------------


def _central_diff_blocks(fun, blocks, dim):
    """Jacobians of a batched map by central differences.

    ``blocks`` is a list of (B, k_i) arrays; ``fun`` maps such a list to
    (B, dim). Returns a list of (B, dim, k_i) Jacobians. All perturbed states
    are evaluated in a single call to ``fun``.
    """
    B = blocks[0].shape[0]
    sizes = [b.shape[1] for b in blocks]
    K = sum(sizes)
    X = np.concatenate(blocks, axis=1)
    H = FD_STEP_SCALE * np.maximum(1.0, np.abs(X))
    P = np.repeat(X[:, None, :], 2 * K, axis=1)
    idx = np.arange(K)
    P[:, 2 * idx, idx] += H
    P[:, 2 * idx + 1, idx] -= H
    flat = P.reshape(B * 2 * K, K)
    offs = np.cumsum([0] + sizes)
    E = fun([flat[:, offs[i]:offs[i + 1]] for i in range(len(sizes))])
    E = E.reshape(B, K, 2, dim)
    J = (E[:, :, 0, :] - E[:, :, 1, :]) / (2.0 * H[:, :, None])  # (B, K, dim)
    J = np.swapaxes(J, 1, 2)  # (B, dim, K)
    return [J[:, :, offs[i]:offs[i + 1]] for i in range(len(sizes))]


def _repeat_for(base, nrows):
    """Repeat per-factor data rows to match an FD perturbation batch."""
    reps = nrows // base.shape[0]
    return base if reps == 1 else np.repeat(base, reps, axis=0)


class ForwardDynamicsFactor(Factor):
    """Ties ddq to the equation of motion with known applied forces.

    e = ddq_model(q, dq) - ddq; gravity is evaluated at the current q and the
    external force vector is fixed data baked into the factor.
    """

    kind = "forward-dynamics"

    def __init__(self, q_key, dq_key, ddq_key, system: MechanismSystem, noise, F_ext=None):
        self.system = system
        n = system.layout.n
        self.F_ext = np.zeros(n) if F_ext is None else np.asarray(F_ext, dtype=float)
        super().__init__((q_key, dq_key, ddq_key), n, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def batch_error(cls, factors, values):
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ddqs = _stack(factors, values, 2)
        F_ext = np.stack([f.F_ext for f in factors])
        return factors[0].system.accel_dep(qs, dqs, F_ext).ddq - ddqs

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ddqs = _stack(factors, values, 2)
        F_ext = np.stack([f.F_ext for f in factors])
        system = factors[0].system
        B, n = qs.shape

        def accel(blocks):
            q_b, dq_b = blocks
            return system.accel_dep(q_b, dq_b, _repeat_for(F_ext, q_b.shape[0])).ddq

        Jq, Jdq = _central_diff_blocks(accel, [qs, dqs], n)
        e = accel([qs, dqs]) - ddqs
        Jddq = np.broadcast_to(-np.eye(n), (B, n, n))
        return e, [Jq, Jdq, Jddq]


class InverseDynamicsFactor(Factor):
    """Forward-dynamics residual with the generalized forces as a variable.

    e = ddq_model(q, dq, Q) - ddq; gravity stays internal, so the connected Q
    is the applied force beyond gravity.
    """

    kind = "inverse-dynamics"

    def __init__(self, q_key, dq_key, ddq_key, Q_key, system: MechanismSystem,
                 noise, F_ext=None):
        self.system = system
        n = system.layout.n
        self.F_ext = np.zeros(n) if F_ext is None else np.asarray(F_ext, dtype=float)
        super().__init__((q_key, dq_key, ddq_key, Q_key), n, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def batch_error(cls, factors, values):
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ddqs = _stack(factors, values, 2)
        Qs = _stack(factors, values, 3)
        F_ext = np.stack([f.F_ext for f in factors])
        return factors[0].system.accel_dep(qs, dqs, F_ext + Qs).ddq - ddqs

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        qs = _stack(factors, values, 0)
        dqs = _stack(factors, values, 1)
        ddqs = _stack(factors, values, 2)
        Qs = _stack(factors, values, 3)
        F_ext = np.stack([f.F_ext for f in factors])
        system = factors[0].system
        B, n = qs.shape

        def accel(blocks):
            q_b, dq_b, Q_b = blocks
            return system.accel_dep(q_b, dq_b, _repeat_for(F_ext, q_b.shape[0]) + Q_b).ddq

        Jq, Jdq, JQ = _central_diff_blocks(accel, [qs, dqs, Qs], n)
        e = accel([qs, dqs, Qs]) - ddqs
        Jddq = np.broadcast_to(-np.eye(n), (B, n, n))
        return e, [Jq, Jdq, Jddq, JQ]


class DofForwardDynamicsFactor(Factor):
    """Equation of motion reduced to the dofs, with known applied forces.

    e = ddz_model(z, dz) - ddz. The reduced dynamics also needs the full
    configuration, so a companion q at the same timestep is connected; its
    dof slots are overwritten by z before evaluating, which makes the model
    a function of (z, dz) with q supplying only the remaining coordinates.
    """

    kind = "dof-forward-dynamics"

    def __init__(self, q_key, z_key, dz_key, ddz_key, system: MechanismSystem,
                 noise, F_ext=None):
        self.system = system
        self.F_ext = (np.zeros(system.layout.n) if F_ext is None
                      else np.asarray(F_ext, dtype=float))
        super().__init__((q_key, z_key, dz_key, ddz_key), system.layout.d, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def batch_error(cls, factors, values):
        qs = _stack(factors, values, 0)
        zs = _stack(factors, values, 1)
        dzs = _stack(factors, values, 2)
        ddzs = _stack(factors, values, 3)
        F_ext = np.stack([f.F_ext for f in factors])
        return factors[0].system.accel_indep_scattered(qs, zs, dzs, F_ext).ddz - ddzs

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        qs = _stack(factors, values, 0)
        zs = _stack(factors, values, 1)
        dzs = _stack(factors, values, 2)
        ddzs = _stack(factors, values, 3)
        F_ext = np.stack([f.F_ext for f in factors])
        system = factors[0].system
        B, d = ddzs.shape

        def accel(blocks):
            q_b, z_b, dz_b = blocks
            F = _repeat_for(F_ext, q_b.shape[0])
            return system.accel_indep_scattered(q_b, z_b, dz_b, F).ddz

        Jq, Jz, Jdz = _central_diff_blocks(accel, [qs, zs, dzs], d)
        e = accel([qs, zs, dzs]) - ddzs
        Jddz = np.broadcast_to(-np.eye(d), (B, d, d))
        return e, [Jq, Jz, Jdz, Jddz]


class DofInverseDynamicsFactor(Factor):
    """Reduced equation of motion with the generalized forces as a variable.

    e = ddz_model(z, dz, Q) - ddz; Q lives in the full coordinate space and
    is projected by the reduced dynamics internally.
    """

    kind = "dof-inverse-dynamics"

    def __init__(self, q_key, z_key, dz_key, ddz_key, Q_key,
                 system: MechanismSystem, noise, F_ext=None):
        self.system = system
        self.F_ext = (np.zeros(system.layout.n) if F_ext is None
                      else np.asarray(F_ext, dtype=float))
        super().__init__((q_key, z_key, dz_key, ddz_key, Q_key), system.layout.d, noise)

    def group_key(self):
        return (self.kind, id(self.system))

    @classmethod
    def batch_error(cls, factors, values):
        qs = _stack(factors, values, 0)
        zs = _stack(factors, values, 1)
        dzs = _stack(factors, values, 2)
        ddzs = _stack(factors, values, 3)
        Qs = _stack(factors, values, 4)
        F_ext = np.stack([f.F_ext for f in factors])
        return (
            factors[0].system.accel_indep_scattered(qs, zs, dzs, F_ext + Qs).ddz - ddzs
        )

    @classmethod
    def batch_error_and_jacobians(cls, factors, values):
        qs = _stack(factors, values, 0)
        zs = _stack(factors, values, 1)
        dzs = _stack(factors, values, 2)
        ddzs = _stack(factors, values, 3)
        Qs = _stack(factors, values, 4)
        F_ext = np.stack([f.F_ext for f in factors])
        system = factors[0].system
        B, d = ddzs.shape

        def accel(blocks):
            q_b, z_b, dz_b, Q_b = blocks
            F = _repeat_for(F_ext, q_b.shape[0]) + Q_b
            return system.accel_indep_scattered(q_b, z_b, dz_b, F).ddz

        Jq, Jz, Jdz, JQ = _central_diff_blocks(accel, [qs, zs, dzs, Qs], d)
        e = accel([qs, zs, dzs, Qs]) - ddzs
        Jddz = np.broadcast_to(-np.eye(d), (B, d, d))
        return e, [Jq, Jz, Jdz, Jddz, JQ]
