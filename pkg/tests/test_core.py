import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import rosen, rosen_der

from aoescape.core import (
    EscapeConfig,
    Objective,
    QuasiNewtonConfig,
    Termination,
    escape_loop,
    finite_diff_gradient,
    quasi_newton_minimize,
    toy_coordinate_ao,
    toy_diagonal_escape,
    toy_objective,
)


def _toy():
    return Objective(lambda z: toy_objective(z[0], z[1]))


class TestToySaddle:
    def test_ao_stuck_at_origin(self):
        z, _ = toy_coordinate_ao(np.zeros(2))
        np.testing.assert_array_equal(z, [0.0, 0.0])
        assert toy_objective(*z) == 0.0

    def test_escape_reaches_box_corner(self):
        x, rep = escape_loop(_toy(), toy_coordinate_ao, toy_diagonal_escape, np.zeros(2))
        assert toy_objective(*x) == pytest.approx(-1e4)
        assert abs(abs(x[0]) - 10) < 1e-9 and x[0] == x[1]
        assert rep.terminated_by is Termination.IMPROVEMENT_BELOW_EPSILON
        assert rep.rounds[0] == (0.0, pytest.approx(-1e4))

    def test_ao_from_nonsaddle_start(self):
        z, _ = toy_coordinate_ao(np.array([1.0, -0.5]))
        assert toy_objective(*z) < toy_objective(1.0, -0.5)


class TestEscapeLoop:
    def _counter(self, steps):
        # objective is the state itself, escape decrements by the next entry
        it = iter(steps)

        def esc(x):
            return x - next(it, 0.0), 1

        return Objective(lambda x: float(x)), (lambda x: (x, 1)), esc

    def test_stops_when_improvement_small(self):
        f, ao, esc = self._counter([1.0, 0.5, 1e-9])
        x, rep = escape_loop(f, ao, esc, 0.0, EscapeConfig(epsilon=1e-6))
        assert len(rep.rounds) == 3
        assert x == pytest.approx(-1.5 - 1e-9)
        assert rep.terminated_by is Termination.IMPROVEMENT_BELOW_EPSILON

    def test_round_cap(self):
        f, ao, esc = self._counter([1.0] * 10)
        _, rep = escape_loop(f, ao, esc, 0.0, EscapeConfig(max_rounds=3))
        assert len(rep.rounds) == 3
        assert rep.terminated_by is Termination.ROUND_CAP

    def test_start_converged_skips_first_ao(self):
        calls = []
        f = Objective(lambda x: float(x))
        ao = lambda x: (calls.append(x) or x, 1)
        _, rep = escape_loop(f, ao, lambda x: (x, 1), 0.0, start_converged=True)
        assert calls == [] and rep.total_ao_iterations == 0

    def test_rejects_ascending_escape(self):
        f = Objective(lambda x: float(x))
        x, rep = escape_loop(f, lambda x: (x, 1), lambda x: (x + 5.0, 1), 1.0)
        assert x == 1.0
        assert rep.rounds == [(1.0, 1.0)]

    def test_default_epsilon_scales_with_start(self):
        assert EscapeConfig().resolve_epsilon(-1e6) == pytest.approx(1e-6 * (1 + 1e6))
        assert EscapeConfig(epsilon=0.1).resolve_epsilon(5.0) == 0.1

    @pytest.mark.parametrize("kw", [{"epsilon": 0.0}, {"max_rounds": 0}, {"ao_tol": -1.0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            EscapeConfig(**kw)

    def test_report_dict_is_plain(self):
        _, rep = escape_loop(_toy(), toy_coordinate_ao, toy_diagonal_escape, np.zeros(2))
        d = rep.to_dict()
        assert d["terminated_by"] == "improvement_below_epsilon"
        assert isinstance(d["rounds"][0][0], float)


class TestQuasiNewton:
    def test_rosenbrock(self):
        f = Objective(rosen, rosen_der)
        res = quasi_newton_minimize(f, np.array([-1.2, 1.0]))
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)

    @pytest.mark.parametrize("d", range(1, 11))
    def test_quadratic_finite_termination(self, d):
        rng = np.random.default_rng(d)
        M = rng.standard_normal((d, d))
        A = M @ M.T + d * np.eye(d)
        b = rng.standard_normal(d)
        f = Objective(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b)
        res = quasi_newton_minimize(f, np.zeros(d), QuasiNewtonConfig(grad_tol=1e-9))
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), rtol=1e-7, atol=1e-9)
        # d steps in exact arithmetic; allow a couple for rounding
        assert res.n_iter <= d + 3

    def test_quartic_without_gradient(self):
        f = Objective(lambda x: float((x[0] - 3.0) ** 4))
        res = quasi_newton_minimize(f, np.array([0.0]), QuasiNewtonConfig(grad_tol=1e-10))
        assert abs(res.x[0] - 3.0) < 1e-2
        assert res.fun < 1e-8

    def test_never_worse_than_start(self):
        f = Objective(lambda x: float(np.abs(x).sum()))
        x0 = np.array([0.0, 0.0])
        res = quasi_newton_minimize(f, x0)
        assert res.fun <= f(x0)

    def test_retract_to_sphere(self):
        A = np.diag([3.0, 1.0, 2.0])
        f = Objective(lambda w: float(w @ A @ w), lambda w: 2 * A @ w)
        unit = lambda w: w / np.linalg.norm(w)
        res = quasi_newton_minimize(f, np.ones(3), retract=unit)
        assert np.linalg.norm(res.x) == pytest.approx(1.0)
        assert res.fun <= f(unit(np.ones(3)))

    @pytest.mark.parametrize("kw", [{"grad_tol": 0}, {"max_iter": 0}, {"line_search": "wolfe"},
                                    {"armijo_c": 1.5}, {"backtrack_factor": 1.0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            QuasiNewtonConfig(**kw)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5))
def test_finite_diff_matches_analytic(xs):
    x = np.array(xs)
    f = lambda z: float(np.sum(np.sin(z)) + z @ z)
    np.testing.assert_allclose(finite_diff_gradient(f, x), np.cos(x) + 2 * x, atol=1e-7)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda z: 0.0, np.zeros(2), h=0.0)


class TestSmallCases:
    @pytest.mark.parametrize("xy,val", [((0, 0), 0.0), ((1, 1), -1.0), ((2, 0), 4.0)])
    def test_toy_values(self, xy, val):
        assert toy_objective(*xy) == val

    def test_single_round_when_nothing_improves(self):
        f = Objective(lambda x: float(x @ x))
        stay = lambda x: (x, 1)
        x0 = np.zeros(2)
        x, rep = escape_loop(f, stay, stay, x0)
        assert len(rep.rounds) == 1
        np.testing.assert_array_equal(x, x0)

    def test_convex_quadratic_block_ao_with_scaling(self):
        a = np.array([1.0, -2.0, 0.5, 3.0])
        f = Objective(lambda z: float(np.sum((z - a) ** 2)))

        def block_ao(z):
            # exact minimization over the first half, then the second half
            z = z.copy()
            z[:2] = a[:2]
            z[2:] = a[2:]
            return z, 1

        def scale_escape(z):
            # best rescaling of the second block; a no-op at the optimum
            s = z[2:]
            v = float(s @ a[2:] / (s @ s)) if s @ s > 0 else 1.0
            return np.concatenate([z[:2], v * s]), 1

        cfg = EscapeConfig(ao_tol=1e-10)
        x, rep = escape_loop(f, block_ao, scale_escape, np.ones(4), cfg)
        np.testing.assert_allclose(x, a, atol=cfg.ao_tol)
        f_ao, f_esc = rep.rounds[0]
        assert f_ao - f_esc < cfg.resolve_epsilon(f(np.ones(4)))

    def test_qn_sphere_to_center(self):
        a = np.array([1.5, -0.5, 2.0])
        f = Objective(lambda x: float(np.sum((x - a) ** 2)), lambda x: 2 * (x - a))
        cfg = QuasiNewtonConfig(grad_tol=1e-9)
        res = quasi_newton_minimize(f, np.array([10.0, 3.0, -4.0]), cfg)
        assert res.grad_norm <= cfg.grad_tol
        np.testing.assert_allclose(res.x, a, atol=1e-9)

    @pytest.mark.parametrize("d", [2, 5, 10])
    def test_quadratic_spec_bound(self, d):
        rng = np.random.default_rng(100 + d)
        M = rng.standard_normal((d, d))
        A = M @ M.T + np.eye(d)
        b = rng.standard_normal(d)
        f = Objective(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b)
        res = quasi_newton_minimize(f, np.zeros(d), QuasiNewtonConfig(grad_tol=1e-8))
        assert res.grad_norm < 1e-8 and res.n_iter <= d + 5

    def test_rosenbrock_tolerance(self):
        res = quasi_newton_minimize(Objective(rosen, rosen_der), np.array([-1.2, 1.0]))
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)

    def test_stall_is_flagged(self):
        # gradient that points the wrong way: no descent step exists
        f = Objective(lambda x: float(x[0] ** 2), lambda x: -2 * x)
        res = quasi_newton_minimize(f, np.array([1.0]))
        assert res.stalled and not res.converged
        assert res.fun <= 1.0

    def test_fd_examples(self):
        g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
        assert abs(g[0] - 6.0) < 1e-6
        g = finite_diff_gradient(lambda x: float(2 * x[0] + 1), np.array([-7.3]))
        assert g[0] == pytest.approx(2.0, abs=1e-8)
