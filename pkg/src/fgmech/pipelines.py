"""Problem pipelines: forward/inverse dynamics graphs and the classical oracle.

``run_forward`` builds the per-timestep variables and factors of the forward
simulation graph (in either coordinate formulation) and sweeps a fixed-lag
smoother over the horizon. ``run_inverse`` builds the inverse-dynamics graph
in four stages, batch-optimizing after each, and returns the generalized
forces. ``oracle_forward`` is the classical reference integrator: it solves
the augmented dynamics system directly, steps with the trapezoidal rule at a
fraction of the pipeline timestep and projects states back onto the
constraint manifolds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import solve_kkt_accel, solve_position_problem, solve_velocity_problem
from .errors import GridMismatchError, InputError, SolverDivergedError
from .factors import (
    CONSTRAINED_EPS,
    ConstrainedNoise,
    DofForwardDynamicsFactor,
    DofPositionFactor,
    DofVelocityFactor,
    ForwardDynamicsFactor,
    InverseDynamicsFactor,
    IsotropicNoise,
    Key,
    NoiseModel,
    PositionConstraintFactor,
    PriorFactor,
    SoftEqualityFactor,
    TrapezoidalIntegratorFactor,
    Var,
    VelocityConstraintFactor,
)
from .graph import FactorGraph, Values
from .mechanism import MechanismDef, pack_dofs
from .solver import FixedLagSmoother, LMConfig, optimize_lm
from .system import MechanismSystem

FORMULATION_DEPENDENT = "dependent"
FORMULATION_INDEPENDENT = "independent"

# Per-slot variances of the soft full-configuration prior used by the
# independent-coordinate pipeline to disambiguate the assembly branch.
_INDEP_Q0_VAR_DOF = 1e-3
_INDEP_Q0_VAR_OTHER = 1.0


@dataclass
class NoiseConfig:
    """Factor noise variances; ``prior_q0=None`` selects the pipeline default.

    The dependent pipeline treats the initial configuration as perfectly
    known (surrogate variance); the independent pipeline uses a soft diagonal
    prior (tighter on the dof slots) scaled by ``prior_q0``.
    """

    prior_q0: float | None = None
    prior_dq0: float = CONSTRAINED_EPS
    integrator: float = 1e-2
    dynamics: float = 1e-4
    constraints: float = CONSTRAINED_EPS
    soft_equality: float = 1e2

    def replace(self, **kw) -> "NoiseConfig":
        return replace(self, **kw)


@dataclass
class ForwardConfig:
    T_end: float
    dt: float = 1e-3
    window: int = 2
    formulation: str = FORMULATION_DEPENDENT
    q0: np.ndarray | None = None
    dq0: np.ndarray | None = None
    z0: np.ndarray | None = None
    dz0: np.ndarray | None = None
    q0_guess: np.ndarray | None = None
    F_ext: object = None  # callable t -> n-vector, or None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def __post_init__(self):
        if self.dt <= 0.0:
            raise InputError("dt must be > 0")
        if self.window < 2:
            raise InputError("window length must be >= 2")
        if self.formulation not in (FORMULATION_DEPENDENT, FORMULATION_INDEPENDENT):
            raise InputError(f"unknown formulation {self.formulation!r}")


@dataclass
class InverseConfig:
    T_end: float
    z_ref: object  # callable t -> d-vector (or scalar for d=1), or (N+1, d) array
    dt: float = 1e-3
    actuated_idxs: tuple[int, ...] | None = None  # default: relative coords with torque slots
    q0_guess: np.ndarray | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    lm: LMConfig = field(default_factory=lambda: LMConfig(max_iterations=60))


@dataclass
class Trajectory:
    """Uniformly sampled state history; Q carries generalized forces if any."""

    dt: float
    t: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray
    Q: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    def field_array(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        if arr is None:
            raise InputError(f"trajectory has no {name!r} data")
        return arr


def _as_system(mech) -> MechanismSystem:
    if isinstance(mech, MechanismSystem):
        return mech
    if isinstance(mech, MechanismDef):
        return MechanismSystem(mech)
    raise InputError(f"expected MechanismDef or MechanismSystem, got {type(mech)!r}")


def _nsteps(T_end: float, dt: float) -> int:
    n = int(round(T_end / dt))
    if abs(n * dt - T_end) > 1e-9 * max(1.0, abs(T_end)):
        raise InputError("T_end must be an integer multiple of dt")
    return n


def _f_ext_at(F_ext, t: float, n: int) -> np.ndarray | None:
    if F_ext is None:
        return None
    out = np.asarray(F_ext(t), dtype=float)
    if out.shape != (n,):
        raise InputError(f"external force schedule must return shape ({n},)")
    return out


def _initial_state_dep(system, config):
    if config.q0 is not None:
        q0 = np.asarray(config.q0, dtype=float)
    elif config.z0 is not None:
        guess = config.q0_guess
        if guess is None:
            raise InputError("independent initial state needs a q0_guess")
        q0 = solve_position_problem(
            system.kin, guess, list(system.layout.dof_idxs), np.atleast_1d(config.z0)
        )
    else:
        raise InputError("forward run needs q0 or z0")
    if config.dq0 is not None:
        dq0 = np.asarray(config.dq0, dtype=float)
    elif config.dz0 is not None:
        kin = system.kin.eval(q0)
        dq0 = solve_velocity_problem(kin, system.layout, np.atleast_1d(config.dz0))
    else:
        dq0 = np.zeros(system.n)
    return q0, dq0


def run_forward(mech, config: ForwardConfig) -> Trajectory:
    """Forward dynamic simulation via fixed-lag smoothing of the problem graph."""
    system = _as_system(mech)
    if config.formulation == FORMULATION_DEPENDENT:
        return _run_forward_dep(system, config)
    return _run_forward_indep(system, config)


def _run_forward_dep(system: MechanismSystem, config: ForwardConfig) -> Trajectory:
    n = system.n
    nsteps = _nsteps(config.T_end, config.dt)
    dt = config.dt
    noise = config.noise

    prior_q0_var = noise.prior_q0 if noise.prior_q0 is not None else CONSTRAINED_EPS
    nm_prior_q0 = NoiseModel(np.full(n, prior_q0_var))
    nm_prior_dq0 = NoiseModel(np.full(n, noise.prior_dq0))
    nm_ti = IsotropicNoise(noise.integrator, n)
    nm_dyn = IsotropicNoise(noise.dynamics, n)
    nm_con = NoiseModel(np.full(system.layout.m, noise.constraints))

    q0, dq0 = _initial_state_dep(system, config)
    smoother = FixedLagSmoother(config.window, config.lm)
    smoother.add_variable(Key(Var.q, 0), n, q0)
    smoother.add_variable(Key(Var.dq, 0), n, dq0)
    smoother.add_factor(PriorFactor(Key(Var.q, 0), q0, nm_prior_q0))
    smoother.add_factor(PriorFactor(Key(Var.dq, 0), dq0, nm_prior_dq0))

    ddq0 = system.accel_dep(q0, dq0, _f_ext_at(config.F_ext, 0.0, n)).ddq
    q_pred, dq_pred, ddq_pred = q0, dq0, ddq0

    for t in range(1, nsteps + 1):
        q_pred = q_pred + dt * dq_pred
        kq, kdq, kddq = Key(Var.q, t), Key(Var.dq, t), Key(Var.ddq, t)
        smoother.add_variable(kq, n, q_pred)
        smoother.add_variable(kdq, n, dq_pred)
        smoother.add_variable(kddq, n, ddq_pred)
        prev_q, prev_dq = Key(Var.q, t - 1), Key(Var.dq, t - 1)
        smoother.add_factor(
            TrapezoidalIntegratorFactor(prev_q, kq, prev_dq, kdq, dt, nm_ti)
        )
        if t == 1:
            smoother.add_factor(
                TrapezoidalIntegratorFactor(
                    prev_dq, kdq, None, kddq, dt, nm_ti, dx_t_value=ddq0
                )
            )
        else:
            smoother.add_factor(
                TrapezoidalIntegratorFactor(
                    prev_dq, kdq, Key(Var.ddq, t - 1), kddq, dt, nm_ti
                )
            )
        smoother.add_factor(PositionConstraintFactor(kq, system, nm_con))
        smoother.add_factor(VelocityConstraintFactor(kq, kdq, system, nm_con))
        smoother.add_factor(
            ForwardDynamicsFactor(
                kq, kdq, kddq, system, nm_dyn, _f_ext_at(config.F_ext, t * dt, n)
            )
        )
        try:
            smoother.step(t)
        except SolverDivergedError as exc:
            exc.timestep = t
            exc.trajectory_prefix = _collect_dep(system, smoother.values, t - 1, dt, ddq0)
            raise

    traj = _collect_dep(system, smoother.values, nsteps, dt, ddq0)
    traj.stats["window_iterations"] = list(smoother.window_iterations)
    _forward_stats(system, traj)
    return traj


def _collect_dep(system, values, last_t, dt, ddq0) -> Trajectory:
    n = system.n
    T = last_t + 1
    q = np.zeros((T, n))
    dq = np.zeros((T, n))
    ddq = np.zeros((T, n))
    ddq[0] = ddq0
    for t in range(T):
        q[t] = values[Key(Var.q, t)]
        dq[t] = values[Key(Var.dq, t)]
        if t > 0:
            ddq[t] = values[Key(Var.ddq, t)]
    return Trajectory(dt, np.arange(T) * dt, q, dq, ddq)


def _forward_stats(system, traj: Trajectory):
    ev = system.kin.eval(traj.q, traj.dq)
    traj.stats["max_phi"] = float(np.max(np.abs(ev.phi))) if ev.phi.size else 0.0
    vel = np.einsum("tmn,tn->tm", ev.phi_q, traj.dq)
    traj.stats["max_vel_constraint"] = float(np.max(np.abs(vel))) if vel.size else 0.0


def _run_forward_indep(system: MechanismSystem, config: ForwardConfig) -> Trajectory:
    n, d = system.n, system.d
    layout = system.layout
    nsteps = _nsteps(config.T_end, config.dt)
    dt = config.dt
    noise = config.noise

    q0, dq0 = _initial_state_dep(system, config)
    z0 = pack_dofs(q0, layout)
    dz0 = pack_dofs(dq0, layout)

    q0_scale = noise.prior_q0 if noise.prior_q0 is not None else 1.0
    diag = np.full(n, _INDEP_Q0_VAR_OTHER)
    diag[list(layout.dof_idxs)] = _INDEP_Q0_VAR_DOF
    nm_prior_q0 = NoiseModel(q0_scale * diag)
    nm_prior_z0 = ConstrainedNoise(d)
    nm_prior_dz0 = NoiseModel(np.full(d, noise.prior_dq0))
    nm_ti = IsotropicNoise(noise.integrator, d)
    nm_con = NoiseModel(np.full(layout.m + d, noise.constraints))
    nm_dyn = IsotropicNoise(noise.dynamics, d)
    nm_eq = IsotropicNoise(noise.soft_equality, n)

    smoother = FixedLagSmoother(config.window, config.lm)
    kq0, kdq0 = Key(Var.q, 0), Key(Var.dq, 0)
    kz0, kdz0 = Key(Var.z, 0), Key(Var.dz, 0)
    smoother.add_variable(kq0, n, q0)
    smoother.add_variable(kdq0, n, dq0)
    smoother.add_variable(kz0, d, z0)
    smoother.add_variable(kdz0, d, dz0)
    smoother.add_factor(PriorFactor(kz0, z0, nm_prior_z0))
    smoother.add_factor(PriorFactor(kdz0, dz0, nm_prior_dz0))
    smoother.add_factor(PriorFactor(kq0, q0, nm_prior_q0))
    smoother.add_factor(DofPositionFactor(kq0, kz0, system, nm_con))
    smoother.add_factor(DofVelocityFactor(kq0, kdq0, kdz0, system, nm_con))

    ddz0 = system.accel_indep(q0, dz0, _f_ext_at(config.F_ext, 0.0, n)).ddz
    q_pred, dq_pred = q0, dq0
    z_pred, dz_pred, ddz_pred = z0, dz0, ddz0

    for t in range(1, nsteps + 1):
        q_pred = q_pred + dt * dq_pred
        z_pred = z_pred + dt * dz_pred
        kq, kdq = Key(Var.q, t), Key(Var.dq, t)
        kz, kdz, kddz = Key(Var.z, t), Key(Var.dz, t), Key(Var.ddz, t)
        smoother.add_variable(kq, n, q_pred)
        smoother.add_variable(kdq, n, dq_pred)
        smoother.add_variable(kz, d, z_pred)
        smoother.add_variable(kdz, d, dz_pred)
        smoother.add_variable(kddz, d, ddz_pred)
        smoother.add_factor(
            TrapezoidalIntegratorFactor(Key(Var.z, t - 1), kz, Key(Var.dz, t - 1), kdz, dt, nm_ti)
        )
        if t == 1:
            smoother.add_factor(
                TrapezoidalIntegratorFactor(
                    Key(Var.dz, 0), kdz, None, kddz, dt, nm_ti, dx_t_value=ddz0
                )
            )
        else:
            smoother.add_factor(
                TrapezoidalIntegratorFactor(
                    Key(Var.dz, t - 1), kdz, Key(Var.ddz, t - 1), kddz, dt, nm_ti
                )
            )
        smoother.add_factor(SoftEqualityFactor(Key(Var.q, t - 1), kq, nm_eq))
        smoother.add_factor(DofPositionFactor(kq, kz, system, nm_con))
        smoother.add_factor(DofVelocityFactor(kq, kdq, kdz, system, nm_con))
        smoother.add_factor(
            DofForwardDynamicsFactor(
                kq, kz, kdz, kddz, system, nm_dyn, _f_ext_at(config.F_ext, t * dt, n)
            )
        )
        try:
            smoother.step(t)
        except SolverDivergedError as exc:
            exc.timestep = t
            exc.trajectory_prefix = _collect_indep(system, smoother.values, t - 1, dt)
            raise

    traj = _collect_indep(system, smoother.values, nsteps, dt)
    traj.stats["window_iterations"] = list(smoother.window_iterations)
    _forward_stats(system, traj)
    return traj


def _collect_indep(system, values, last_t, dt) -> Trajectory:
    n = system.n
    T = last_t + 1
    q = np.zeros((T, n))
    dq = np.zeros((T, n))
    for t in range(T):
        q[t] = values[Key(Var.q, t)]
        dq[t] = values[Key(Var.dq, t)]
    # dependent accelerations reconstructed from the reduced dynamics
    ddq = system.accel_indep(q, pack_dofs(dq, system.layout)).ddq
    return Trajectory(dt, np.arange(T) * dt, q, dq, ddq)


# ---------------------------------------------------------------------------
# Inverse dynamics
# ---------------------------------------------------------------------------


def _sample_reference(z_ref, times, d):
    if callable(z_ref):
        out = np.array([np.atleast_1d(np.asarray(z_ref(t), dtype=float)) for t in times])
    else:
        out = np.asarray(z_ref, dtype=float)
        if out.ndim == 1:
            out = out[:, None]
    if out.shape != (len(times), d):
        raise InputError(f"reference must sample to shape ({len(times)}, {d})")
    return out


def run_inverse(mech, config: InverseConfig) -> Trajectory:
    """Staged inverse dynamics: solve for the forces tracking a dof reference.

    Stage 1 optimizes configurations under the reference priors and position
    constraints; stage 2 adds velocities/accelerations and integrators;
    stage 3 adds velocity constraints; stage 4 adds the generalized forces
    with their dynamics factors. The batch optimizer runs after each stage.
    """
    system = _as_system(mech)
    n, d = system.n, system.d
    layout = system.layout
    noise = config.noise
    nsteps = _nsteps(config.T_end, config.dt)
    dt = config.dt
    times = np.arange(nsteps + 1) * dt
    z_ref = _sample_reference(config.z_ref, times, d)

    actuated = config.actuated_idxs
    if actuated is None:
        actuated = tuple(
            layout.rel_slots[rc.id]
            for rc in system.mech.relative_coords
            if rc.applied_torque_slot
        )
    if not actuated:
        raise InputError("inverse dynamics needs a non-empty actuated set")
    free_force_slots = [i for i in range(n) if i not in actuated]

    q0_guess = config.q0_guess
    if q0_guess is None:
        raise InputError("inverse run needs a q0_guess consistent with the reference start")
    q0 = solve_position_problem(system.kin, q0_guess, list(layout.dof_idxs), z_ref[0])

    prior_q0_var = noise.prior_q0 if noise.prior_q0 is not None else CONSTRAINED_EPS
    nm_prior_q0 = NoiseModel(np.full(n, prior_q0_var))
    nm_prior_dq0 = NoiseModel(np.full(n, noise.prior_dq0))
    nm_ref = NoiseModel(np.full(d, CONSTRAINED_EPS))
    nm_con = NoiseModel(np.full(layout.m, noise.constraints))
    nm_ti = IsotropicNoise(noise.integrator, n)
    nm_dyn = IsotropicNoise(noise.dynamics, n)
    nm_eq = IsotropicNoise(noise.soft_equality, n)
    nm_qprior = NoiseModel(np.full(len(free_force_slots), CONSTRAINED_EPS))

    graph = FactorGraph()
    values = Values()
    stage_stats = []

    def run_stage(stage):
        nonlocal values
        try:
            result = optimize_lm(graph, values, config.lm)
        except SolverDivergedError as exc:
            exc.stage = stage
            raise SolverDivergedError(
                f"inverse dynamics stage {stage} diverged: {exc}", stage=stage
            ) from exc
        values.update(result.values)
        stage_stats.append(
            {"stage": stage, "iterations": result.iterations, "cost": result.cost}
        )

    # Stage 1: configurations under reference priors and position constraints
    dof_list = list(layout.dof_idxs)
    for t in range(nsteps + 1):
        kq = Key(Var.q, t)
        graph.add_variable(kq, n)
        values[kq] = np.array(q0)
        graph.add_factor(PriorFactor(kq, z_ref[t], nm_ref, idxs=dof_list, var_dim=n))
        graph.add_factor(PositionConstraintFactor(kq, system, nm_con))
        if t > 0:
            graph.add_factor(SoftEqualityFactor(Key(Var.q, t - 1), kq, nm_eq))
    graph.add_factor(PriorFactor(Key(Var.q, 0), q0, nm_prior_q0))
    run_stage(1)

    # Stage 2: velocities, accelerations and integrators
    for t in range(nsteps + 1):
        graph.add_variable(Key(Var.dq, t), n)
        graph.add_variable(Key(Var.ddq, t), n)
        values[Key(Var.dq, t)] = np.zeros(n)
        values[Key(Var.ddq, t)] = np.zeros(n)
    graph.add_factor(PriorFactor(Key(Var.dq, 0), np.zeros(n), nm_prior_dq0))
    for t in range(1, nsteps + 1):
        graph.add_factor(
            TrapezoidalIntegratorFactor(
                Key(Var.q, t - 1), Key(Var.q, t), Key(Var.dq, t - 1), Key(Var.dq, t),
                dt, nm_ti,
            )
        )
        graph.add_factor(
            TrapezoidalIntegratorFactor(
                Key(Var.dq, t - 1), Key(Var.dq, t), Key(Var.ddq, t - 1), Key(Var.ddq, t),
                dt, nm_ti,
            )
        )
    run_stage(2)

    # Stage 3: velocity constraints
    for t in range(nsteps + 1):
        graph.add_factor(
            VelocityConstraintFactor(Key(Var.q, t), Key(Var.dq, t), system, nm_con)
        )
    run_stage(3)

    # Stage 4: generalized forces and inverse dynamics factors
    for t in range(nsteps + 1):
        kQ = Key(Var.Q, t)
        graph.add_variable(kQ, n)
        values[kQ] = np.zeros(n)
        if free_force_slots:
            graph.add_factor(
                PriorFactor(
                    kQ, np.zeros(len(free_force_slots)), nm_qprior,
                    idxs=free_force_slots, var_dim=n,
                )
            )
        graph.add_factor(
            InverseDynamicsFactor(
                Key(Var.q, t), Key(Var.dq, t), Key(Var.ddq, t), kQ, system, nm_dyn
            )
        )
    run_stage(4)

    q = np.stack([values[Key(Var.q, t)] for t in range(nsteps + 1)])
    dq = np.stack([values[Key(Var.dq, t)] for t in range(nsteps + 1)])
    ddq = np.stack([values[Key(Var.ddq, t)] for t in range(nsteps + 1)])
    Q = np.stack([values[Key(Var.Q, t)] for t in range(nsteps + 1)])
    traj = Trajectory(dt, times, q, dq, ddq, Q)
    traj.stats["stages"] = stage_stats
    traj.stats["tracking_error_max"] = float(
        np.max(np.abs(pack_dofs(q, layout) - z_ref))
    )
    _forward_stats(system, traj)
    return traj


# ---------------------------------------------------------------------------
# Classical oracle integrator
# ---------------------------------------------------------------------------


def oracle_forward(
    mech,
    q0,
    dq0,
    dt: float,
    T_end: float,
    substep_ratio: int = 10,
    F_ext=None,
    fixed_point_tol: float = 1e-13,
    projection_tol: float = 1e-12,
) -> Trajectory:
    """Classical reference run: trapezoidal stepping of the augmented system.

    Integrates at dt / substep_ratio, solving the implicit trapezoidal stage
    by fixed-point iteration on the acceleration, then projecting positions
    onto Phi = 0 (Newton on the normal equations) and velocities onto
    Phi_q dq = 0 (least squares). States are stored every ``substep_ratio``
    substeps, i.e. on the pipeline grid.
    """
    system = _as_system(mech)
    n = system.n
    nsteps = _nsteps(T_end, dt)
    h = dt / substep_ratio

    def accel(q, dq, t):
        kin = system.kin.eval(q, dq)
        ddq, _ = solve_kkt_accel(system.M, kin, system.force(q, _f_ext_at(F_ext, t, n)))
        return ddq

    def project(q, dq):
        for _ in range(20):
            ev = system.kin.eval(q)
            if ev.phi.size == 0 or np.max(np.abs(ev.phi)) < projection_tol:
                break
            G = ev.phi_q @ ev.phi_q.T
            q = q - ev.phi_q.T @ np.linalg.solve(G, ev.phi)
        ev = system.kin.eval(q)
        if ev.phi.size:
            G = ev.phi_q @ ev.phi_q.T
            dq = dq - ev.phi_q.T @ np.linalg.solve(G, ev.phi_q @ dq)
        return q, dq

    q = np.array(q0, dtype=float)
    dq = np.array(dq0, dtype=float)
    q, dq = project(q, dq)
    ddq = accel(q, dq, 0.0)

    T = nsteps + 1
    qs = np.zeros((T, n))
    dqs = np.zeros((T, n))
    ddqs = np.zeros((T, n))
    qs[0], dqs[0], ddqs[0] = q, dq, ddq

    t_now = 0.0
    for step in range(1, nsteps * substep_ratio + 1):
        t_next = step * h
        ddq_next = ddq
        for _ in range(12):
            dq_next = dq + 0.5 * h * (ddq + ddq_next)
            q_next = q + 0.5 * h * (dq + dq_next)
            ddq_new = accel(q_next, dq_next, t_next)
            delta = np.max(np.abs(ddq_new - ddq_next))
            ddq_next = ddq_new
            if delta < fixed_point_tol:
                break
        q_next, dq_next = project(q_next, dq_next)
        ddq_next = accel(q_next, dq_next, t_next)
        q, dq, ddq, t_now = q_next, dq_next, ddq_next, t_next
        if step % substep_ratio == 0:
            k = step // substep_ratio
            qs[k], dqs[k], ddqs[k] = q, dq, ddq

    traj = Trajectory(dt, np.arange(T) * dt, qs, dqs, ddqs)
    _forward_stats(system, traj)
    return traj


def mechanism_energy(system: MechanismSystem, q, dq) -> np.ndarray:
    """Total mechanical energy (kinetic + gravity potential), batched."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    ke = 0.5 * np.einsum("...i,ij,...j->...", dq, system.M, dq)
    mech, layout = system.mech, system.layout
    g = system.mass.g
    pe = np.zeros(q.shape[:-1])
    rc_by_body = {rc.attached_body: rc for rc in mech.relative_coords}
    for bi, body in enumerate(mech.bodies):
        if body.mass == 0.0:
            continue
        if body.inertia_model == "rotational-on-relative-coord":
            rc = rc_by_body[bi]
            pivot = next(p for p in body.endpoints if mech.point(p).fixed)
            y0 = mech.point(pivot).xy[1]
            th = q[..., layout.rel_slots[rc.id]]
            pe = pe + body.mass * g * (y0 + 0.5 * body.length * np.sin(th))
            continue
        y = 0.0
        for pid in body.endpoints:
            p = mech.point(pid)
            y = y + (p.xy[1] if p.fixed else q[..., layout.point_slots[pid][1]])
        pe = pe + body.mass * g * 0.5 * y
    return ke + pe


# ---------------------------------------------------------------------------
# Metrics and CSV I/O
# ---------------------------------------------------------------------------


def _decimate_to_common(a: Trajectory, b: Trajectory):
    if a.dt > b.dt:
        a, b = b, a  # a is finer now
    ratio = b.dt / a.dt
    k = int(round(ratio))
    if abs(k * a.dt - b.dt) > 1e-9 * b.dt:
        raise GridMismatchError(f"dt ratio {ratio} is not an integer")
    return a.dt * k, a.t[::k], b.t


def rmse(a: Trajectory, b: Trajectory, which: str = "q") -> float:
    """Root mean square difference pooled over time and coordinates."""
    A, B = a.field_array(which), b.field_array(which)
    if a.dt != b.dt:
        if a.dt < b.dt:
            k = int(round(b.dt / a.dt))
            if abs(k * a.dt - b.dt) > 1e-9 * b.dt:
                raise GridMismatchError("trajectory grids are incommensurate")
            A = A[::k]
        else:
            k = int(round(a.dt / b.dt))
            if abs(k * b.dt - a.dt) > 1e-9 * a.dt:
                raise GridMismatchError("trajectory grids are incommensurate")
            B = B[::k]
    T = min(A.shape[0], B.shape[0])
    if A.shape[0] != B.shape[0]:
        A, B = A[:T], B[:T]
    diff = A - B
    return float(np.sqrt(np.mean(diff * diff)))


def write_trajectory_csv(traj: Trajectory, path, comments: dict | None = None):
    """CSV with 17-significant-digit rows; '#' comment lines echo the config."""
    n = traj.q.shape[1]
    cols = (
        ["t"]
        + [f"q{i}" for i in range(n)]
        + [f"dq{i}" for i in range(n)]
        + [f"ddq{i}" for i in range(n)]
    )
    data = [traj.t[:, None], traj.q, traj.dq, traj.ddq]
    if traj.Q is not None:
        cols += [f"Q{i}" for i in range(n)]
        data.append(traj.Q)
    table = np.concatenate(data, axis=1)
    with open(path, "w") as fh:
        merged = dict(comments or {})
        merged.setdefault("dt", traj.dt)
        for key, val in merged.items():
            fh.write(f"# {key}={val}\n")
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    comments = {}
    header = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, _, val = line[1:].partition("=")
                    comments[key.strip()] = val.strip()
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(x) for x in line.split(",")])
    if header is None:
        raise InputError(f"{path}: no header row found")
    table = np.asarray(rows, dtype=float)
    names = [c for c in header if c.startswith("q")]
    n = len(names)
    has_Q = any(c.startswith("Q") for c in header)
    t = table[:, 0]
    q = table[:, 1 : 1 + n]
    dq = table[:, 1 + n : 1 + 2 * n]
    ddq = table[:, 1 + 2 * n : 1 + 3 * n]
    Q = table[:, 1 + 3 * n : 1 + 4 * n] if has_Q else None
    dt = float(comments.get("dt", t[1] - t[0] if len(t) > 1 else 0.0))
    traj = Trajectory(dt, t, q, dq, ddq, Q)
    traj.stats.update(comments)
    return traj
