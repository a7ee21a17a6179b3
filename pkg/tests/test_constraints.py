import numpy as np
import pytest

from fgmech.constraints import (
    AbsoluteAngleBlock,
    ConstantDistanceBlock,
    FixedPinnedSliderBlock,
    MechanismKinematics,
    MobilePinnedSliderBlock,
    assemble,
    build_constraint_blocks,
    eval_block,
)
from fgmech.errors import ConfigurationError
from fgmech.fourbar import assemble_four_bar, make_four_bar
from fgmech.mechanism import CoordinateLayout, build_layout

FD_TOL = 1e-6


def mobile_local(n_slots):
    return [(i, 0.0) for i in range(n_slots)]


def distance_block(L=5.0):
    return ConstantDistanceBlock(mobile_local(4), L)


def mobile_slider_block():
    return MobilePinnedSliderBlock(mobile_local(6))


def angle_block(L=2.0):
    return AbsoluteAngleBlock(mobile_local(5), L)


def fixed_slider_block(a=(0.0, 0.0), b=(1.0, 2.0)):
    return FixedPinnedSliderBlock(mobile_local(2), a, b)


ALL_BLOCKS = [
    (distance_block(), 4),
    (fixed_slider_block(), 2),
    (mobile_slider_block(), 6),
    (angle_block(), 5),
]


def sample_state(rng, n, block):
    """Random state; keeps the angle away from the branch threshold so finite
    differences never straddle a branch switch."""
    q = rng.uniform(-2.0, 2.0, size=n)
    if isinstance(block, AbsoluteAngleBlock):
        while abs(abs(np.sin(q[-1])) - 1 / np.sqrt(2)) < 1e-3:
            q[-1] = rng.uniform(-np.pi, np.pi)
    dq = rng.normal(size=n)
    v = rng.normal(size=n)
    return q, dq, v


def dense(vals, cols, n):
    row = np.zeros(n)
    row[cols] = vals
    return row


class TestBlockExamples:
    def test_distance_345(self):
        blk = distance_block(5.0)
        ev = eval_block(blk, np.array([0.0, 0.0, 3.0, 4.0]))
        assert ev.phi == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(ev.phi_q_vals, [-6.0, -8.0, 6.0, 8.0])

    def test_distance_velocity_row(self):
        blk = distance_block(5.0)
        q = np.array([0.0, 0.0, 3.0, 4.0])
        dq = np.array([0.0, 0.0, 1.0, 0.0])
        ev = eval_block(blk, q, dq)
        np.testing.assert_allclose(ev.dphi_q_vals, [-2.0, 0.0, 2.0, 0.0])
        assert ev.phi_q_vals @ dq[blk.cols] == pytest.approx(6.0)
        # cross-check against (phi_q(q + h dq) - phi_q(q)) / h
        h = 1e-7
        fd = (eval_block(blk, q + h * dq).phi_q_vals - ev.phi_q_vals) / h
        np.testing.assert_allclose(ev.dphi_q_vals, fd, atol=1e-6)

    def test_mobile_slider_example(self):
        blk = mobile_slider_block()
        q = np.array([1.0, 1.0, 0.0, 0.0, 2.0, 2.0])
        ev = eval_block(blk, q)
        assert ev.phi == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(ev.phi_q_vals, [-2.0, 2.0, 1.0, -1.0, 1.0, -1.0])

    def test_absolute_angle_branches(self):
        blk = angle_block(2.0)
        ev = eval_block(blk, np.array([0.0, 0.0, 0.0, 2.0, np.pi / 2]))
        assert ev.branch == 1
        assert ev.phi == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(ev.phi_q_vals, [-1.0, 0.0, 1.0, 0.0, 2.0], atol=1e-14)

        ev = eval_block(blk, np.array([0.0, 0.0, 2.0, 0.0, 0.0]))
        assert ev.branch == 2
        assert ev.phi == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(ev.phi_q_vals, [0.0, -1.0, 0.0, 1.0, -2.0], atol=1e-14)

    def test_fixed_slider_constant_jacobian(self):
        blk = fixed_slider_block((0.0, 0.0), (2.0, 1.0))
        ev = eval_block(blk, np.array([2.0, 1.0]), np.ones(2), np.ones(2), np.ones(2))
        assert ev.phi == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(ev.phi_q_vals, [-1.0, 2.0])
        np.testing.assert_allclose(ev.dphi_q_vals, 0.0)
        np.testing.assert_allclose(ev.phiqq_v_vals, 0.0)
        np.testing.assert_allclose(ev.dotphiqq_v_vals, 0.0)


class TestDerivativeOracles:
    @pytest.mark.parametrize("block,n", ALL_BLOCKS)
    def test_phi_q_matches_finite_differences(self, block, n):
        rng = np.random.default_rng(10)
        h = 1e-6
        for _ in range(200):
            q, _, _ = sample_state(rng, n, block)
            ev = eval_block(block, q)
            for i in range(n):
                qp, qm = q.copy(), q.copy()
                qp[i] += h
                qm[i] -= h
                fd = (eval_block(block, qp).phi - eval_block(block, qm).phi) / (2 * h)
                assert abs(dense(ev.phi_q_vals, block.cols, n)[i] - fd) < FD_TOL

    @pytest.mark.parametrize("block,n", ALL_BLOCKS)
    def test_dphi_q_is_time_derivative_of_phi_q(self, block, n):
        rng = np.random.default_rng(11)
        h = 1e-7
        for _ in range(200):
            q, dq, _ = sample_state(rng, n, block)
            ev = eval_block(block, q, dq)
            fd = (
                eval_block(block, q + h * dq, dq).phi_q_vals
                - eval_block(block, q - h * dq, dq).phi_q_vals
            ) / (2 * h)
            np.testing.assert_allclose(ev.dphi_q_vals, fd, atol=FD_TOL)

    @pytest.mark.parametrize("block,n", ALL_BLOCKS)
    def test_phiqq_product_matches_directional_derivative(self, block, n):
        rng = np.random.default_rng(12)
        h = 1e-7
        for _ in range(200):
            q, dq, v = sample_state(rng, n, block)
            ev = eval_block(block, q, dq, v_phiqq=v)
            fd = (
                eval_block(block, q + h * v).phi_q_vals
                - eval_block(block, q - h * v).phi_q_vals
            ) / (2 * h)
            np.testing.assert_allclose(ev.phiqq_v_vals, fd, atol=FD_TOL)

    @pytest.mark.parametrize("block,n", ALL_BLOCKS)
    def test_dotphiqq_product_matches_directional_derivative(self, block, n):
        rng = np.random.default_rng(13)
        h = 1e-7
        for _ in range(200):
            q, dq, v = sample_state(rng, n, block)
            ev = eval_block(block, q, dq, v_dotphiqq=v)
            fd = (
                eval_block(block, q + h * v, dq).dphi_q_vals
                - eval_block(block, q - h * v, dq).dphi_q_vals
            ) / (2 * h)
            np.testing.assert_allclose(ev.dotphiqq_v_vals, fd, atol=FD_TOL)

    def test_velocity_identity_phiqq_dq_equals_dphi_q(self):
        # the product of the second-derivative tensor with dq reproduces dphi_q
        rng = np.random.default_rng(14)
        for block, n in ALL_BLOCKS:
            for _ in range(50):
                q, dq, _ = sample_state(rng, n, block)
                ev = eval_block(block, q, dq, v_phiqq=dq)
                np.testing.assert_allclose(ev.phiqq_v_vals, ev.dphi_q_vals, atol=1e-12)


class TestClosedForms:
    def test_distance_dotphiqq_is_zero(self):
        rng = np.random.default_rng(15)
        blk = distance_block(2.0)
        q, dq, v = rng.normal(size=(3, 4))
        ev = eval_block(blk, q, dq, v_dotphiqq=v)
        np.testing.assert_array_equal(ev.dotphiqq_v_vals, np.zeros(4))

    def test_mobile_slider_phiqq_times_accel(self):
        rng = np.random.default_rng(16)
        blk = mobile_slider_block()
        q, dq, ddq = rng.normal(size=(3, 6))
        ev = eval_block(blk, q, dq, v_phiqq=ddq, v_dotphiqq=dq)
        expected = np.array(
            [
                ddq[3] - ddq[5],
                ddq[4] - ddq[2],
                ddq[5] - ddq[1],
                ddq[0] - ddq[4],
                ddq[1] - ddq[3],
                ddq[2] - ddq[0],
            ]
        )
        np.testing.assert_allclose(ev.phiqq_v_vals, expected, atol=1e-14)
        np.testing.assert_array_equal(ev.dotphiqq_v_vals, np.zeros(6))

    def test_angle_closed_forms(self):
        L = 1.7
        blk = angle_block(L)
        rng = np.random.default_rng(17)
        for _ in range(50):
            q = rng.normal(size=5)
            dq = rng.normal(size=5)
            ddq = rng.normal(size=5)
            th, thd, thdd = q[4], dq[4], ddq[4]
            ev = eval_block(blk, q, dq, v_phiqq=ddq, v_dotphiqq=dq)
            if abs(np.sin(th)) > 1 / np.sqrt(2):
                np.testing.assert_allclose(ev.dphi_q_vals[4], L * thd * np.cos(th))
                np.testing.assert_allclose(ev.phiqq_v_vals[4], L * thdd * np.cos(th))
                np.testing.assert_allclose(ev.dotphiqq_v_vals[4], -L * thd**2 * np.sin(th))
            else:
                np.testing.assert_allclose(ev.dphi_q_vals[4], L * thd * np.sin(th))
                np.testing.assert_allclose(ev.phiqq_v_vals[4], L * thdd * np.sin(th))
                np.testing.assert_allclose(ev.dotphiqq_v_vals[4], L * thd**2 * np.cos(th))
            np.testing.assert_array_equal(ev.dphi_q_vals[:4], np.zeros(4))


class TestBranchRule:
    def test_both_branches_vanish_on_consistent_configuration(self):
        L = 2.0
        blk = angle_block(L)
        for th in (np.pi / 4, 3 * np.pi / 4, -np.pi / 4):
            assert abs(abs(np.sin(th)) - 1 / np.sqrt(2)) < 1e-12
            q = np.array([0.3, -0.2, 0.3 + L * np.cos(th), -0.2 + L * np.sin(th), th])
            for eps in (-1e-9, 1e-9):
                qq = q.copy()
                qq[4] = th + eps
                ev = eval_block(blk, qq)
                assert abs(ev.phi) < 1e-8

    def test_selected_branch_never_degenerate(self):
        L = 3.0
        blk = angle_block(L)
        for th in np.linspace(-np.pi, np.pi, 721):
            q = np.array([0.0, 0.0, L * np.cos(th), L * np.sin(th), th])
            ev = eval_block(blk, q)
            assert abs(ev.phi_q_vals[4]) >= L / np.sqrt(2) - 1e-12


class TestAssemble:
    def test_four_bar_reference_configuration(self):
        mech = make_four_bar()
        kin = MechanismKinematics(mech)
        q = np.array([1.0, 0.0, 1.0, 2.0, 0.0])
        ev = kin.eval(q)
        np.testing.assert_allclose(ev.phi, np.zeros(4), atol=1e-12)
        assert ev.phi_q.shape == (4, 5)

    def test_closed_form_assembly_is_on_manifold(self):
        mech = make_four_bar()
        kin = MechanismKinematics(mech)
        for th in np.linspace(-np.pi, np.pi, 60):
            q = assemble_four_bar(th)
            assert np.max(np.abs(kin.eval(q).phi)) < 1e-12

    def test_zero_velocity_zeroes_dphi_and_c(self):
        mech = make_four_bar()
        kin = MechanismKinematics(mech)
        q = assemble_four_bar(0.3)
        ev = kin.eval(q, np.zeros(5))
        np.testing.assert_array_equal(ev.dphi_q, np.zeros((4, 5)))
        np.testing.assert_array_equal(ev.c, np.zeros(4))

    def test_empty_block_list(self):
        layout = CoordinateLayout(n=3, m=0, point_slots={}, rel_slots={}, dof_idxs=())
        ev = assemble([], layout, np.zeros(3), np.zeros(3))
        assert ev.phi.shape == (0,)
        assert ev.phi_q.shape == (0, 3)
        assert ev.c.shape == (0,)

    def test_duplicate_blocks_rejected(self):
        layout = CoordinateLayout(n=4, m=2, point_slots={}, rel_slots={}, dof_idxs=())
        blocks = [distance_block(2.0), distance_block(2.0)]
        with pytest.raises(ConfigurationError):
            assemble(blocks, layout, np.zeros(4))

    def test_explicit_restatement_is_deduplicated(self):
        mech = make_four_bar()
        explicit = MechanismKinematics(
            type(mech)(
                mech.points,
                mech.bodies,
                mech.relative_coords,
                mech.dof_idxs,
                ({"kind": "constant-distance", "points": ["P1", "P2"], "length": 2.0},),
            )
        )
        assert len(explicit.blocks) == 4

    def test_batched_eval_matches_single(self):
        mech = make_four_bar()
        kin = MechanismKinematics(mech)
        rng = np.random.default_rng(18)
        qs = rng.normal(size=(7, 5))
        dqs = rng.normal(size=(7, 5))
        ev = kin.eval(qs, dqs)
        for b in range(7):
            single = kin.eval(qs[b], dqs[b])
            np.testing.assert_allclose(ev.phi[b], single.phi, atol=1e-14)
            np.testing.assert_allclose(ev.phi_q[b], single.phi_q, atol=1e-14)
            np.testing.assert_allclose(ev.dphi_q[b], single.dphi_q, atol=1e-14)
            np.testing.assert_allclose(ev.c[b], single.c, atol=1e-14)

    def test_row_entries_sparse_pattern(self):
        mech = make_four_bar()
        kin = MechanismKinematics(mech)
        ev = kin.eval(assemble_four_bar(0.2))
        cols, vals = ev.row_entries(0)
        np.testing.assert_array_equal(cols, [0, 1])  # crank touches P1 only
        assert vals.shape == (2,)

    def test_auto_generation_order(self):
        mech = make_four_bar()
        blocks = build_constraint_blocks(mech, build_layout(mech))
        kinds = [b.kind for b in blocks]
        assert kinds == [
            "constant-distance",
            "constant-distance",
            "constant-distance",
            "absolute-angle",
        ]
