"""Vehicle-model tests: dynamics oracle, stationary points, mode tables,
and the transition automaton."""

import math

import numpy as np
import pytest
from conftest import DESK_T_T

from viaplan.vehicle import (
    DEFAULT_PARAMS,
    CarParams,
    FullState,
    Mode,
    ModeTable,
    TransitionAutomaton,
    build_automaton,
    build_mode_table,
    delta_limit,
    derivative,
    drift_point,
    integrate,
    stationary_point,
    transition_feasible,
)

P = DEFAULT_PARAMS


def reference_rhs(s, delta, d, p):
    """Independent re-derivation of the equations of motion, term by term."""
    X, Y, phi, v_x, v_y, omega = s
    alpha_f = delta - math.atan2(omega * p.l_f + v_y, v_x)
    alpha_r = math.atan2(omega * p.l_r - v_y, v_x)
    F_fy = p.D_f * math.sin(p.C_f * math.atan(p.B_f * alpha_f))
    F_ry = p.D_r * math.sin(p.C_r * math.atan(p.B_r * alpha_r))
    F_rx = (p.c_m1 - p.c_m2 * v_x) * d - p.c_r0 - p.c_r2 * v_x * v_x
    return (
        v_x * math.cos(phi) - v_y * math.sin(phi),
        v_x * math.sin(phi) + v_y * math.cos(phi),
        omega,
        (F_rx - F_fy * math.sin(delta) + p.m * v_y * omega) / p.m,
        (F_ry + F_fy * math.cos(delta) - p.m * v_x * omega) / p.m,
        (F_fy * p.l_f * math.cos(delta) - F_ry * p.l_r) / p.I_z,
    )


def integrate_n(s, delta, d, dt, n, p):
    for _ in range(n):
        s = integrate(s, delta, d, dt, p)
    return s


class TestDerivative:
    def test_rest_equilibrium(self):
        d0 = P.c_r0 / P.c_m1  # F_rx(0, d0) = 0
        s = FullState(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        assert derivative(s, 0.0, d0, P) == pytest.approx((0.0,) * 6, abs=1e-14)

    def test_straight_driving_symmetry(self):
        s = FullState(1.0, -2.0, 0.7, 2.0, 0.0, 0.0)
        ds = derivative(s, 0.0, 0.4, P)
        assert ds.X == pytest.approx(2.0 * math.cos(0.7))
        assert ds.Y == pytest.approx(2.0 * math.sin(0.7))
        assert ds.phi == 0.0
        assert ds.v_y == pytest.approx(0.0, abs=1e-14)
        assert ds.omega == pytest.approx(0.0, abs=1e-14)

    def test_matches_independent_evaluation(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            s = FullState(
                X=rng.uniform(-5, 5),
                Y=rng.uniform(-5, 5),
                phi=rng.uniform(0, 2 * math.pi),
                v_x=rng.uniform(0.3, 4.0),
                v_y=rng.uniform(-1.5, 1.5),
                omega=rng.uniform(-7.0, 7.0),
            )
            delta = rng.uniform(-P.delta_max, P.delta_max)
            d = rng.uniform(0.0, 1.0)
            got = derivative(s, delta, d, P)
            want = reference_rhs(s, delta, d, P)
            assert got == pytest.approx(want, abs=1e-12)


class TestIntegrate:
    def test_equilibrium_unchanged(self):
        d0 = P.c_r0 / P.c_m1
        s = FullState(1.0, 2.0, 0.5, 0.0, 0.0, 0.0)
        out = integrate(s, 0.0, d0, 0.05, P)
        assert out == pytest.approx(s, abs=1e-13)

    def test_straight_advance(self):
        s = FullState(0.0, 0.0, 0.0, 2.0, 0.0, 0.0)
        d_hold = (P.c_r0 + P.c_r2 * 4.0) / (P.c_m1 - P.c_m2 * 2.0)
        out = integrate(s, 0.0, d_hold, 0.01, P)
        assert out.X == pytest.approx(0.02, abs=1e-6)
        assert out.Y == pytest.approx(0.0, abs=1e-12)

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            integrate(FullState(0, 0, 0, 1, 0, 0), 0.0, 0.5, 0.0, P)

    def test_richardson_order(self):
        # convergence order of RK4 measured by step halving
        s = FullState(0.0, 0.0, 0.3, 2.0, -0.2, 1.5)
        delta, d, T = 0.2, 0.6, 0.04
        a = np.asarray(integrate_n(s, delta, d, T, 1, P))
        b = np.asarray(integrate_n(s, delta, d, T / 2, 2, P))
        c = np.asarray(integrate_n(s, delta, d, T / 4, 4, P))
        e1 = np.max(np.abs(a - b))
        e2 = np.max(np.abs(b - c))
        order = math.log2(e1 / e2)
        assert order >= 3.5


class TestStationaryPoint:
    def test_zero_steer(self):
        sol = stationary_point(2.0, 0.0, P)
        assert sol is not None
        v_y, omega, d = sol
        assert v_y == pytest.approx(0.0, abs=1e-10)
        assert omega == pytest.approx(0.0, abs=1e-10)
        # d solves F_rx(v_x, d) = 0
        assert (P.c_m1 - P.c_m2 * 2.0) * d - P.c_r0 - P.c_r2 * 4.0 == pytest.approx(0.0, abs=1e-7)

    def test_sign_flip_mirror(self):
        a = stationary_point(1.8, 0.25, P)
        b = stationary_point(1.8, -0.25, P)
        assert a is not None and b is not None
        assert b[0] == pytest.approx(-a[0], abs=1e-12)
        assert b[1] == pytest.approx(-a[1], abs=1e-12)
        assert b[2] == pytest.approx(a[2], abs=1e-12)

    def test_rejects_nonpositive_speed(self):
        with pytest.raises(ValueError):
            stationary_point(0.0, 0.1, P)

    @pytest.mark.parametrize(
        "v_min,v_max,v_step,n_delta",
        [(0.5, 3.5, 0.25, 5), (0.6, 3.4, 0.2, 7)],
    )
    def test_residual_sweep(self, v_min, v_max, v_step, n_delta):
        # the residual of each returned root is the oracle
        n_v = int(round((v_max - v_min) / v_step)) + 1
        for i in range(n_v):
            v_x = v_min + v_step * i
            lim = delta_limit(v_x, P)
            for delta in np.linspace(-lim, lim, n_delta):
                sol = stationary_point(v_x, float(delta), P)
                assert sol is not None, f"no root at v_x={v_x}, delta={delta}"
                v_y, omega, d = sol
                assert 0.0 <= d <= 1.0
                ds = derivative(FullState(0, 0, 0, v_x, v_y, omega), float(delta), d, P)
                res = max(abs(ds.v_x), abs(ds.v_y), abs(ds.omega))
                assert res < 1e-8


class TestDriftPoint:
    def test_rear_slip_past_peak(self):
        sol = drift_point(2.0, -0.1, P)
        assert sol is not None
        v_y, omega, d = sol
        assert omega > 0.0 and 0.0 <= d <= 1.0
        slip_r = math.atan2(omega * P.l_r - v_y, 2.0)
        peak = math.tan(math.pi / (2 * P.C_r)) / P.B_r
        assert slip_r > 1.2 * peak

    def test_mirror(self):
        a = drift_point(2.0, -0.1, P)
        b = drift_point(2.0, 0.1, P)
        assert a is not None and b is not None
        assert b == pytest.approx((-a[0], -a[1], a[2]))

    def test_is_stationary(self):
        sol = drift_point(2.2, -0.2, P)
        assert sol is not None
        ds = derivative(FullState(0, 0, 0, 2.2, sol[0], sol[1]), -0.2, sol[2], P)
        assert max(abs(ds.v_x), abs(ds.v_y), abs(ds.omega)) < 1e-8


class TestModeTable:
    def test_count_coarse_grid(self):
        t = build_mode_table(P, v_min=0.5, v_max=3.5, v_step=0.25, n_delta=5, t_pp=0.2)
        assert t.failed == ()
        assert t.n == 89

    def test_count_fine_grid(self):
        t = build_mode_table(P, v_min=0.6, v_max=3.4, v_step=0.2, n_delta=7, t_pp=0.2)
        assert t.failed == ()
        assert t.n == 129

    def test_single_mode_no_drift(self):
        t = build_mode_table(P, v_min=2.0, v_max=2.0, v_step=0.25, n_delta=1,
                             t_pp=0.2, drift_specs=None)
        assert t.n == 1
        assert t.modes[0].delta == 0.0

    def test_all_modes_stationary(self, desk_table):
        t = build_mode_table(P, v_min=0.5, v_max=3.5, v_step=0.25, n_delta=5, t_pp=0.2)
        for table in (desk_table, t):
            for m in table.modes:
                ds = derivative(FullState(0, 0, 0, m.v_x, m.v_y, m.omega), m.delta, m.d, P)
                assert max(abs(ds.v_x), abs(ds.v_y), abs(ds.omega)) < 1e-8
                assert 0.0 <= m.d <= 1.0

    def test_mirror_closure(self):
        # symmetric delta grid: for every mode its (v_y, omega, delta) flip is a mode
        t = build_mode_table(P, v_min=0.5, v_max=3.5, v_step=0.25, n_delta=5, t_pp=0.2)
        rows = {(round(m.v_x, 9), round(-m.v_y, 6), round(-m.omega, 6)) for m in t.modes}
        for m in t.modes:
            assert (round(m.v_x, 9), round(m.v_y, 6), round(m.omega, 6)) in rows

    def test_ids_dense_from_one(self, desk_table):
        assert [m.q for m in desk_table.modes] == list(range(1, desk_table.n + 1))
        with pytest.raises(ValueError):
            ModeTable(modes=(Mode(q=2, v_x=1, v_y=0, omega=0, delta=0, d=0.3, L_q=1.2),))

    def test_by_id(self, desk_table):
        assert desk_table.by_id(3).q == 3
        with pytest.raises(ValueError):
            desk_table.by_id(0)
        with pytest.raises(ValueError):
            desk_table.by_id(desk_table.n + 1)

    def test_lipschitz_column_positive(self, desk_table):
        for m in desk_table.modes:
            assert m.L_q > 1.0  # every desk mode moves

    def test_csv_round_trip(self, desk_table, tmp_path):
        path = tmp_path / "modes.csv"
        desk_table.to_csv(path)
        back = ModeTable.from_csv(path)
        assert back.n == desk_table.n
        for a, b in zip(back.modes, desk_table.modes):
            assert a == b


class TestTransitions:
    def test_self_transition(self, desk_table):
        m = desk_table.by_id(5)
        assert transition_feasible(m, m, P, t_t=0.1)

    def test_large_speed_jump_infeasible(self):
        lo = stationary_point(0.6, 0.0, P)
        hi = stationary_point(3.4, 0.0, P)
        a = Mode(q=1, v_x=0.6, v_y=lo[0], omega=lo[1], delta=0.0, d=lo[2], L_q=1.0)
        b = Mode(q=2, v_x=3.4, v_y=hi[0], omega=hi[1], delta=0.0, d=hi[2], L_q=1.0)
        assert not transition_feasible(a, b, P, t_t=0.08)

    def test_asymmetric_pair(self, desk_table, desk_automaton):
        # braking out of the fast right turn works, accelerating into it does not
        assert desk_automaton.allowed[6, 0]
        assert not desk_automaton.allowed[0, 6]
        assert transition_feasible(desk_table.by_id(7), desk_table.by_id(1), P, t_t=DESK_T_T)
        assert not transition_feasible(desk_table.by_id(1), desk_table.by_id(7), P, t_t=DESK_T_T)

    def test_diagonal_all_true(self, desk_automaton):
        assert desk_automaton.allowed.diagonal().all()

    def test_every_mode_has_successor(self, desk_automaton):
        assert desk_automaton.allowed.any(axis=1).all()

    def test_matrix_matches_pairwise_check(self, desk_table, desk_automaton):
        for i, a in enumerate(desk_table.modes):
            for j, b in enumerate(desk_table.modes):
                want = transition_feasible(a, b, P, t_t=DESK_T_T)
                assert desk_automaton.allowed[i, j] == want

    def test_successors_sorted_and_bounds(self, desk_automaton):
        succ = desk_automaton.successors(1)
        assert succ == sorted(succ) and 1 in succ
        with pytest.raises(ValueError):
            desk_automaton.successors(0)

    def test_csv_round_trip(self, desk_automaton, tmp_path):
        path = tmp_path / "automaton.csv"
        desk_automaton.to_csv(path)
        back = TransitionAutomaton.from_csv(path, t_t=desk_automaton.t_t)
        assert np.array_equal(back.allowed, desk_automaton.allowed)


class TestCarParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            CarParams(m=0.0)
        with pytest.raises(ValueError):
            CarParams(D_r=-1.0)
        with pytest.raises(ValueError):
            CarParams(delta_max=0.0)

    def test_mapping_round_trip(self):
        data = P.to_mapping()
        assert CarParams.from_mapping(data) == P

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            CarParams.from_mapping({"m": 1.5, "bogus": 1.0})
