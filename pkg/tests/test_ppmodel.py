"""Path-planning model tests: closed-form step vs ODE oracle, Lipschitz
bounds vs sampled estimates, trajectory sampling, admissible inputs."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viaplan.ppmodel import PPConfig, PPState, admissible, displacement, lipschitz, sample_path, step
from viaplan.vehicle import Mode, TransitionAutomaton

TWO_PI = 2.0 * math.pi


def make_mode(v_x, v_y, omega, q=1):
    return Mode(q=q, v_x=v_x, v_y=v_y, omega=omega, delta=0.0, d=0.5, L_q=0.0)


STRAIGHT = make_mode(2.0, 0.0, 0.0)
ARC = make_mode(2.0, -0.3, 2.5)


def rk4_pose_oracle(x, mode, T, dt=1e-4):
    """Fine-step RK4 on the pose kinematics; independent of the closed form."""

    def f(p):
        c, s = math.cos(p[2]), math.sin(p[2])
        return np.array([
            mode.v_x * c - mode.v_y * s,
            mode.v_x * s + mode.v_y * c,
            mode.omega,
        ])

    p = np.array([x.X, x.Y, x.phi])
    n = int(round(T / dt))
    for _ in range(n):
        k1 = f(p)
        k2 = f(p + 0.5 * dt * k1)
        k3 = f(p + 0.5 * dt * k2)
        k4 = f(p + dt * k3)
        p = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


class TestStep:
    def test_straight_example(self):
        x = PPState(1.0, 2.0, 0.0, 1)
        out = step(x, STRAIGHT, 0.2)
        assert out == PPState(1.4, 2.0, 0.0, 1)

    def test_small_time_continuity(self):
        x = PPState(0.5, -0.5, 1.0, 1)
        out = step(x, ARC, 1e-9)
        assert abs(out.X - x.X) < 1e-8
        assert abs(out.Y - x.Y) < 1e-8
        assert abs(out.phi - x.phi) < 1e-8

    def test_taylor_matches_arc_formula_at_threshold(self):
        # displacement must be continuous across the series/closed-form switch
        w = 2.0
        for mode in (make_mode(2.0, -0.3, w), make_mode(1.0, 0.5, -w)):
            t_switch = 1e-6 / abs(w)
            below = displacement(mode, t_switch * (1 - 1e-9))
            above = displacement(mode, t_switch * (1 + 1e-9))
            assert below == pytest.approx(above, abs=1e-14)

    def test_matches_rk4_oracle(self, desk_table):
        rng = np.random.default_rng(3)
        for mode in desk_table.modes:
            x = PPState(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, TWO_PI), mode.q)
            out = step(x, mode, 0.2)
            ref = rk4_pose_oracle(x, mode, 0.2)
            assert out.X == pytest.approx(ref[0], abs=1e-8)
            assert out.Y == pytest.approx(ref[1], abs=1e-8)
            assert out.phi == pytest.approx(ref[2] % TWO_PI, abs=1e-8)

    def test_mode_id_lookup(self, desk_table):
        x = PPState(0.0, 0.0, 0.0, 1)
        by_id = step(x, 4, 0.2, desk_table)
        by_mode = step(x, desk_table.by_id(4), 0.2)
        assert by_id == by_mode
        with pytest.raises(ValueError):
            step(x, 99, 0.2, desk_table)
        with pytest.raises(ValueError):
            step(x, 4, 0.2)  # id without a table

    def test_phi_wrapped(self):
        x = PPState(0.0, 0.0, 6.0, 1)
        out = step(x, make_mode(1.0, 0.0, 3.0), 0.2)
        assert 0.0 <= out.phi < TWO_PI
        assert out.phi == pytest.approx((6.0 + 0.6) % TWO_PI)

    @given(
        st.floats(0.0, 0.3),
        st.floats(0.0, 0.3),
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.floats(0, TWO_PI, exclude_max=True),
    )
    @settings(max_examples=150, deadline=None)
    def test_semigroup(self, t1, t2, X, Y, phi):
        x = PPState(X, Y, phi, 1)
        two = step(step(x, ARC, t1), ARC, t2)
        one = step(x, ARC, t1 + t2)
        assert two.X == pytest.approx(one.X, abs=1e-12)
        assert two.Y == pytest.approx(one.Y, abs=1e-12)
        d = abs(two.phi - one.phi)
        assert min(d, TWO_PI - d) < 1e-12

    @given(
        st.floats(-50, 50),
        st.floats(-50, 50),
        st.floats(-50, 50),
        st.floats(-50, 50),
        st.floats(0, TWO_PI, exclude_max=True),
    )
    @settings(max_examples=150, deadline=None)
    def test_translation_equivariance(self, X, Y, tx, ty, phi):
        base = step(PPState(X, Y, phi, 1), ARC, 0.2)
        moved = step(PPState(X + tx, Y + ty, phi, 1), ARC, 0.2)
        # identical up to the rounding of one float addition
        assert moved.X == pytest.approx(base.X + tx, abs=1e-12)
        assert moved.Y == pytest.approx(base.Y + ty, abs=1e-12)
        assert moved.phi == base.phi


class TestLipschitz:
    def test_zero_velocity_identity(self):
        assert lipschitz(make_mode(0.0, 0.0, 0.0), 0.2) == 1.0

    def test_straight_example(self):
        L = lipschitz(make_mode(2.0, 0.0, 0.0), 0.16)
        assert L >= 1.32 - 1e-12
        assert L == pytest.approx(1.32)

    def test_dominates_sampled_estimates(self, desk_table):
        # unwrapped one-step map, vectorized over rows of (X, Y, phi)
        def apply(pts, mode, T):
            dx, dy, a = displacement(mode, T)
            c, s = np.cos(pts[:, 2]), np.sin(pts[:, 2])
            return np.stack(
                [pts[:, 0] + c * dx - s * dy, pts[:, 1] + s * dx + c * dy, pts[:, 2] + a],
                axis=1,
            )

        rng = np.random.default_rng(11)
        for mode in desk_table.modes:
            L = lipschitz(mode, 0.2)
            x = rng.uniform([-5, -5, 0], [5, 5, TWO_PI], size=(10_000, 3))
            y = x + rng.uniform(-0.5, 0.5, size=(10_000, 3))
            num = np.max(np.abs(apply(y, mode, 0.2) - apply(x, mode, 0.2)), axis=1)
            den = np.max(np.abs(y - x), axis=1)
            ratios = num / den
            assert L >= ratios.max() - 1e-12


class TestSamplePath:
    def test_two_points_are_endpoints(self):
        x = PPState(0.3, -0.2, 1.1, 1)
        pts = sample_path(x, ARC, 0.2, 2)
        end = step(x, ARC, 0.2)
        assert pts.shape == (2, 2)
        assert pts[0] == pytest.approx([x.X, x.Y])
        assert pts[1] == pytest.approx([end.X, end.Y], abs=1e-12)

    def test_straight_collinear_equal_spacing(self):
        x = PPState(0.0, 0.0, 0.6, 1)
        pts = sample_path(x, STRAIGHT, 0.3, 7)
        gaps = np.diff(pts, axis=0)
        assert np.allclose(gaps, gaps[0], atol=1e-12)

    def test_arc_constant_radius(self):
        x = PPState(1.0, -2.0, 0.8, 1)
        mode = ARC
        pts = sample_path(x, mode, 0.4, 11)
        c, s = math.cos(x.phi), math.sin(x.phi)
        v_w = np.array([mode.v_x * c - mode.v_y * s, mode.v_x * s + mode.v_y * c])
        center = np.array([x.X, x.Y]) + np.array([-v_w[1], v_w[0]]) / mode.omega
        radii = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
        expected = math.hypot(mode.v_x, mode.v_y) / abs(mode.omega)
        assert np.allclose(radii, expected, atol=1e-9)

    def test_rejects_single_point(self):
        with pytest.raises(ValueError):
            sample_path(PPState(0, 0, 0, 1), ARC, 0.2, 1)


class TestAdmissible:
    def test_identity_automaton(self):
        auto = TransitionAutomaton(allowed=np.eye(4, dtype=bool), t_t=0.1)
        assert admissible(PPState(0, 0, 0, 3), auto) == [3]

    def test_full_automaton(self):
        auto = TransitionAutomaton(allowed=np.ones((4, 4), dtype=bool), t_t=0.1)
        assert admissible(PPState(0, 0, 0, 2), auto) == [1, 2, 3, 4]

    def test_matches_automaton_rows(self, desk_automaton):
        for q in range(1, desk_automaton.n + 1):
            got = admissible(PPState(0, 0, 0, q), desk_automaton)
            assert got == desk_automaton.successors(q)
            assert got  # nonempty by the self-transition guarantee


class TestPPConfig:
    def test_validation(self):
        PPConfig(t_pp=0.2, n_samples=11)
        with pytest.raises(ValueError):
            PPConfig(t_pp=0.0, n_samples=5)
        with pytest.raises(ValueError):
            PPConfig(t_pp=0.2, n_samples=1)
