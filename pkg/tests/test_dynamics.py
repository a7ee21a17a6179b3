import numpy as np
import pytest

from fgmech.constraints import AssembledKinematics, MechanismKinematics
from fgmech.dynamics import (
    compute_R,
    forward_accel_dep,
    forward_accel_indep,
    solve_kkt_accel,
    solve_position_problem,
    solve_velocity_problem,
)
from fgmech.errors import (
    BadDofChoiceError,
    PositionProblemDivergedError,
    SingularConfigurationError,
)
from fgmech.fourbar import assemble_four_bar, make_four_bar
from fgmech.mechanism import (
    BodyDef,
    CoordinateLayout,
    MechanismDef,
    PointDef,
    build_layout,
)
from fgmech.system import MechanismSystem


def raw_kin(phi_q, c=None, phi=None):
    """Wrap raw arrays as an AssembledKinematics for direct dynamics tests."""
    phi_q = np.asarray(phi_q, dtype=float)
    m, n = phi_q.shape[-2], phi_q.shape[-1]
    layout = CoordinateLayout(n=n, m=m, point_slots={}, rel_slots={}, dof_idxs=())
    phi = np.zeros(phi_q.shape[:-1]) if phi is None else phi
    return AssembledKinematics(layout, (None,) * m, phi, phi_q, None, None, None, c)


def pendulum_system():
    """Point mass 1 kg at the tip of a massless rigid rod of length 2."""
    mech = MechanismDef(
        points=(PointDef("A", fixed=True, xy=(0.0, 0.0)), PointDef("P")),
        bodies=(BodyDef(("A", "P"), 2.0, 2.0, "point-masses-at-ends"),),
        dof_idxs=(1,),
    )
    return MechanismSystem(mech)


def fourbar_system():
    return MechanismSystem(make_four_bar())


def random_consistent_state(system, rng):
    th = rng.uniform(-np.pi, np.pi)
    q = assemble_four_bar(th)
    kin = system.kin.eval(q)
    dz = rng.normal(size=1)
    dq = solve_velocity_problem(kin, system.layout, dz)
    return q, dq, dz


class TestDependentAcceleration:
    def test_pendulum_at_rest(self):
        sys_ = pendulum_system()
        q, dq = np.array([2.0, 0.0]), np.zeros(2)
        res = sys_.accel_dep(q, dq)
        np.testing.assert_allclose(res.ddq, [0.0, -9.8], atol=1e-12)
        ddq_kkt, _ = solve_kkt_accel(sys_.M, sys_.kin.eval(q, dq), sys_.force(q))
        np.testing.assert_allclose(res.ddq, ddq_kkt, atol=1e-12)

    def test_pendulum_centripetal(self):
        sys_ = pendulum_system()
        q, dq = np.array([2.0, 0.0]), np.array([0.0, 1.0])
        res = sys_.accel_dep(q, dq)
        np.testing.assert_allclose(res.ddq, [-0.5, -9.8], atol=1e-12)
        ddq_kkt, lam = solve_kkt_accel(sys_.M, sys_.kin.eval(q, dq), sys_.force(q))
        np.testing.assert_allclose(res.ddq, ddq_kkt, atol=1e-12)
        np.testing.assert_allclose(res.lam, lam, atol=1e-12)

    def test_unconstrained_particle(self):
        M = np.diag([2.0, 3.0])
        F = np.array([4.0, -6.0])
        res = forward_accel_dep(M, raw_kin(np.zeros((0, 2))), F)
        np.testing.assert_allclose(res.ddq, [2.0, -2.0])
        assert res.lam.shape == (0,)

    def test_acceleration_satisfies_constraint_rhs(self):
        sys_ = fourbar_system()
        rng = np.random.default_rng(5)
        for _ in range(50):
            q, dq, _ = random_consistent_state(sys_, rng)
            kin = sys_.kin.eval(q, dq)
            res = forward_accel_dep(sys_.M, kin, sys_.force(q), sys_.mass.M_inv)
            np.testing.assert_allclose(kin.phi_q @ res.ddq, kin.c, atol=1e-9)

    def test_gamma_symmetric_positive_definite(self):
        sys_ = fourbar_system()
        q, dq, _ = random_consistent_state(sys_, np.random.default_rng(6))
        res = sys_.accel_dep(q, dq)
        np.testing.assert_allclose(res.Gamma, res.Gamma.T, atol=1e-12)
        assert np.linalg.eigvalsh(res.Gamma).min() > 0.0

    def test_block_inversion_identity_random_instances(self):
        # closed form vs direct dense solve of the augmented system
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = rng.integers(2, 8)
            m = rng.integers(1, n)
            A = rng.normal(size=(n, n))
            M = A @ A.T + n * np.eye(n)
            phi_q = rng.normal(size=(m, n))
            F = rng.normal(size=n)
            c = rng.normal(size=m)
            kin = raw_kin(phi_q, c)
            res = forward_accel_dep(M, kin, F)
            ddq_kkt, lam_kkt = solve_kkt_accel(M, kin, F)
            scale = max(1.0, np.linalg.norm(ddq_kkt))
            np.testing.assert_allclose(res.ddq, ddq_kkt, atol=1e-10 * scale)
            np.testing.assert_allclose(res.lam, lam_kkt, atol=1e-9 * scale)

    def test_multipliers_balance_forces(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n, m = 5, 3
            A = rng.normal(size=(n, n))
            M = A @ A.T + n * np.eye(n)
            phi_q = rng.normal(size=(m, n))
            F = rng.normal(size=n)
            c = rng.normal(size=m)
            res = forward_accel_dep(M, raw_kin(phi_q, c), F)
            np.testing.assert_allclose(M @ res.ddq + phi_q.T @ res.lam, F, atol=1e-9)

    def test_singular_configuration_names_pivot(self):
        M = np.eye(2)
        phi_q = np.array([[1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(SingularConfigurationError) as err:
            forward_accel_dep(M, raw_kin(phi_q), np.zeros(2))
        assert err.value.pivot in (0, 1)


class TestRMatrix:
    def test_pendulum_R(self):
        sys_ = pendulum_system()
        kin = sys_.kin.eval(np.array([2.0, 0.0]))
        maps = compute_R(kin, sys_.layout)
        np.testing.assert_allclose(maps.R, [[0.0], [1.0]], atol=1e-12)

    def test_four_bar_R_at_reference(self):
        sys_ = fourbar_system()
        q = np.array([1.0, 0.0, 1.0, 2.0, 0.0])
        kin = sys_.kin.eval(q)
        maps = compute_R(kin, sys_.layout)
        np.testing.assert_allclose(
            maps.R[:, 0], [0.0, 1.0, 2.0 / 3.0, 1.0, 1.0], atol=1e-12
        )
        np.testing.assert_allclose(kin.phi_q @ maps.R, np.zeros((4, 1)), atol=1e-12)
        assert maps.R[4, 0] == pytest.approx(1.0)

    def test_nullspace_and_selection_properties(self):
        sys_ = fourbar_system()
        rng = np.random.default_rng(9)
        for _ in range(20):
            q, _, _ = random_consistent_state(sys_, rng)
            kin = sys_.kin.eval(q)
            maps = compute_R(kin, sys_.layout)
            assert np.max(np.abs(kin.phi_q @ maps.R)) < 1e-10
            np.testing.assert_allclose(maps.R[sys_.layout.dof_idxs, :], np.eye(1), atol=1e-12)

    def test_identity_when_unconstrained(self):
        layout = CoordinateLayout(n=3, m=0, point_slots={}, rel_slots={}, dof_idxs=(0, 1, 2))
        kin = raw_kin(np.zeros((0, 3)))
        maps = compute_R(kin, layout)
        np.testing.assert_allclose(maps.R, np.eye(3), atol=0.0)

    def test_S_reproduces_velocity_split(self):
        # dq = S b + R dz for synthetic right-hand sides b = w
        sys_ = fourbar_system()
        rng = np.random.default_rng(10)
        q, _, _ = random_consistent_state(sys_, rng)
        kin = sys_.kin.eval(q)
        maps = compute_R(kin, sys_.layout)
        for _ in range(10):
            w = rng.normal(size=4)
            dz = rng.normal(size=1)
            dq = maps.S_times(w) + maps.R @ dz
            np.testing.assert_allclose(kin.phi_q @ dq, w, atol=1e-10)
            np.testing.assert_allclose(dq[sys_.layout.dof_idxs], dz, atol=1e-10)

    def test_bad_dof_choice(self):
        sys_ = MechanismSystem(
            type(make_four_bar())(
                make_four_bar().points,
                make_four_bar().bodies,
                make_four_bar().relative_coords,
                (0,),  # x1 cannot parameterize the reference configuration
            )
        )
        kin = sys_.kin.eval(np.array([1.0, 0.0, 1.0, 2.0, 0.0]))
        with pytest.raises(BadDofChoiceError):
            compute_R(kin, sys_.layout)


class TestIndependentAcceleration:
    def test_pendulum_ddz(self):
        sys_ = pendulum_system()
        q, dq = np.array([2.0, 0.0]), np.zeros(2)
        res = forward_accel_indep(sys_.M, sys_.kin.eval(q, dq), sys_.layout, sys_.force(q))
        np.testing.assert_allclose(res.Mbar, [[1.0]], atol=1e-12)
        np.testing.assert_allclose(res.Qbar, [-9.8], atol=1e-12)
        np.testing.assert_allclose(res.ddz, [-9.8], atol=1e-12)

    def test_four_bar_at_rest_matches_projected_gravity(self):
        sys_ = fourbar_system()
        q = np.array([1.0, 0.0, 1.0, 2.0, 0.0])
        kin = sys_.kin.eval(q, np.zeros(5))
        F = sys_.force(q)
        res = forward_accel_indep(sys_.M, kin, sys_.layout, F)
        R = res.R[:, 0]
        expected = (R @ F) / (R @ sys_.M @ R)
        assert R @ F == pytest.approx(-44.1)
        np.testing.assert_allclose(res.ddz, [expected], atol=1e-12)
        dep = forward_accel_dep(sys_.M, kin, F)
        np.testing.assert_allclose(res.ddz[0], dep.ddq[4], atol=1e-10)

    def test_formulation_equivalence_on_random_states(self):
        sys_ = fourbar_system()
        rng = np.random.default_rng(11)
        for _ in range(200):
            q, dq, _ = random_consistent_state(sys_, rng)
            kin = sys_.kin.eval(q, dq)
            F = sys_.force(q)
            dep = forward_accel_dep(sys_.M, kin, F, sys_.mass.M_inv)
            ind = forward_accel_indep(sys_.M, kin, sys_.layout, F, sys_.mass.M_inv)
            np.testing.assert_allclose(ind.ddq, dep.ddq, atol=1e-8)

    def test_acceleration_constraint_closure(self):
        sys_ = fourbar_system()
        rng = np.random.default_rng(12)
        for _ in range(200):
            q, dq, _ = random_consistent_state(sys_, rng)
            kin = sys_.kin.eval(q, dq)
            F = sys_.force(q)
            for ddq in (
                forward_accel_dep(sys_.M, kin, F, sys_.mass.M_inv).ddq,
                forward_accel_indep(sys_.M, kin, sys_.layout, F, sys_.mass.M_inv).ddq,
            ):
                resid = kin.dphi_q @ dq + kin.phi_q @ ddq
                assert np.max(np.abs(resid)) < 1e-9


class TestPositionVelocityProblems:
    def test_four_bar_lock_theta(self):
        sys_ = fourbar_system()
        guess = np.array([0.9, 0.1, 1.2, 1.8, 0.0])
        q = solve_position_problem(sys_.kin, guess, [4], [0.0])
        np.testing.assert_allclose(q, [1.0, 0.0, 1.0, 2.0, 0.0], atol=1e-9)
        assert np.max(np.abs(sys_.kin.eval(q).phi)) < 1e-12

    def test_on_manifold_guess_unchanged(self):
        sys_ = fourbar_system()
        q0 = assemble_four_bar(0.7)
        q = solve_position_problem(sys_.kin, q0, [4], [q0[4]])
        np.testing.assert_array_equal(q, q0)

    def test_infeasible_geometry_diverges(self):
        mech = make_four_bar()
        short = BodyDef(("P1", "P2"), 1.2, 2.0)  # coupler too short to reach at theta=pi
        bad = type(mech)(mech.points, (mech.bodies[0], short, mech.bodies[2]),
                         mech.relative_coords, mech.dof_idxs)
        sys_ = MechanismSystem(bad)
        q0 = solve_position_problem(sys_.kin, np.array([1.0, 0.0, 1.0, 2.0, 0.0]), [4], [0.0])
        with pytest.raises(PositionProblemDivergedError):
            solve_position_problem(sys_.kin, q0, [4], [np.pi])

    def test_velocity_problem(self):
        sys_ = fourbar_system()
        q = np.array([1.0, 0.0, 1.0, 2.0, 0.0])
        kin = sys_.kin.eval(q)
        np.testing.assert_array_equal(
            solve_velocity_problem(kin, sys_.layout, np.zeros(1)), np.zeros(5)
        )
        dq = solve_velocity_problem(kin, sys_.layout, np.ones(1))
        np.testing.assert_allclose(dq, [0.0, 1.0, 2.0 / 3.0, 1.0, 1.0], atol=1e-12)
        assert np.max(np.abs(kin.phi_q @ dq)) < 1e-12

    def test_pendulum_velocity_problem(self):
        sys_ = pendulum_system()
        kin = sys_.kin.eval(np.array([2.0, 0.0]))
        dq = solve_velocity_problem(kin, sys_.layout, np.array([1.0]))
        np.testing.assert_allclose(dq, [0.0, 1.0], atol=1e-12)
