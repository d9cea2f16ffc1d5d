import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aoescape.core import EscapeConfig
from aoescape.data import standardize
from aoescape.mcp import (
    PenaltyMC,
    Subproblem,
    all_sets,
    build_case_specs,
    build_subproblem,
    cd_update,
    coordinate_descent,
    correlation_set,
    enumerate_candidates,
    fit_surfaces,
    gamma_halves,
    hard_threshold,
    lambda_max,
    make_grid,
    mcp_penalty,
    mcp_penalty_deriv,
    mcp_penalty_sum,
    m1_coefficients,
    objective,
    partition_intervals,
    pct_delta,
    pct_delta_e,
    scaling_escape_sweep,
    selective_scaling_step,
    simulate_M1,
    soft_threshold,
    solve_v_on_interval,
    summarize,
    summarize_block,
    var_sel_error,
)
from oracles import brute_force_bv, mcp_vec, random_subproblem, scaled_objective, threshold_grid


def small_problem(seed, n=30, d=8, corr=0.6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X[:, 1:] += corr * X[:, :-1]
    beta = np.zeros(d)
    beta[::3] = rng.choice([-1.0, 1.0], size=beta[::3].size)
    y = X @ beta + 0.5 * rng.normal(size=n)
    return standardize(y, X)


class TestPenalty:
    @pytest.mark.parametrize("lam,gamma", [(0.5, 3.0), (1.0, 1.01), (0.1, 200.0)])
    def test_continuous_at_knot(self, lam, gamma):
        pen = PenaltyMC(lam, gamma)
        k = pen.knot
        assert abs(mcp_penalty(k, pen) - 0.5 * gamma * lam**2) <= 1e-12
        assert abs(mcp_penalty(np.nextafter(k, 0), pen) - mcp_penalty(k, pen)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-5, 5).filter(lambda t: abs(t) > 1e-3),
           st.floats(0.05, 2), st.floats(1.1, 30))
    def test_derivative_matches_difference(self, t, lam, gamma):
        pen = PenaltyMC(lam, gamma)
        if abs(abs(t) - pen.knot) < 1e-4:
            return
        h = 1e-7
        fd = (mcp_penalty(t + h, pen) - mcp_penalty(t - h, pen)) / (2 * h)
        assert mcp_penalty_deriv(t, pen) == pytest.approx(fd, abs=1e-6)

    def test_derivative_undefined_at_zero(self):
        with pytest.raises(ValueError):
            mcp_penalty_deriv(0.0, PenaltyMC(1.0, 2.0))

    @pytest.mark.parametrize("lam,gamma", [(-1.0, 2.0), (1.0, 1.0), (1.0, 0.5)])
    def test_invalid(self, lam, gamma):
        with pytest.raises(ValueError):
            PenaltyMC(lam, gamma)

    def test_sum_matches_scalar(self):
        pen = PenaltyMC(0.3, 2.5)
        b = np.array([-1.0, 0.0, 0.2, 0.74, 0.76, 3.0])
        assert mcp_penalty_sum(b, pen) == pytest.approx(sum(mcp_penalty(t, pen) for t in b))


class TestThreshold:
    @settings(max_examples=80, deadline=None)
    @given(st.floats(-4, 4), st.floats(0.05, 1.5), st.floats(1.05, 40))
    def test_matches_grid_oracle(self, z, lam, gamma):
        ours = cd_update(z, PenaltyMC(lam, gamma))
        ref = threshold_grid(z, lam, gamma, step=1e-4)
        f = lambda b: 0.5 * (b - z) ** 2 + float(mcp_vec(b, lam, gamma))
        # ours is the exact minimizer, so it can only be better than the grid point
        assert f(ours) <= f(ref) + 1e-12
        if abs(ours - ref) > 2e-4:
            # ties between two separated minimizers (hard-threshold regime)
            assert f(ours) == pytest.approx(f(ref), abs=1e-6)

    def test_regions(self):
        pen = PenaltyMC(1.0, 3.0)
        assert cd_update(0.9, pen) == 0.0
        assert cd_update(-2.0, pen) == pytest.approx(-(2.0 - 1.0) / (1 - 1 / 3))
        assert cd_update(3.5, pen) == 3.5

    def test_limits(self):
        z = 1.7
        assert cd_update(z, PenaltyMC(0.5, 1e8)) == pytest.approx(soft_threshold(z, 0.5), rel=1e-7)
        assert cd_update(z, PenaltyMC(0.5, 1.0 + 1e-9)) == hard_threshold(z, 0.5)
        assert soft_threshold(-0.2, 0.5) == 0.0
        assert hard_threshold(0.4, 0.5) == 0.0


class TestCoordinateDescent:
    @pytest.mark.parametrize("gamma", [1.5, 3.0, 50.0])
    def test_fixed_point_and_descent(self, gamma):
        prob = small_problem(0)
        pen = PenaltyMC(0.2 * lambda_max(prob), gamma)
        res = coordinate_descent(prob, pen, tol=1e-12)
        assert res.converged
        assert objective(res.beta, prob, pen) <= objective(np.zeros(prob.d), prob, pen)
        r = prob.y - prob.X @ res.beta
        for j in range(prob.d):
            z = res.beta[j] + prob.X[:, j] @ r
            assert cd_update(z, pen) == pytest.approx(res.beta[j], abs=1e-10)

    def test_objective_nonincreasing_per_sweep(self):
        prob = small_problem(1)
        pen = PenaltyMC(0.05 * lambda_max(prob), 1.5)
        beta = np.zeros(prob.d)
        vals = [objective(beta, prob, pen)]
        for _ in range(20):
            beta = coordinate_descent(prob, pen, beta, max_sweeps=1).beta
            vals.append(objective(beta, prob, pen))
        assert np.all(np.diff(vals) <= 1e-14)

    def test_lambda_max_zero_solution(self):
        prob = small_problem(2)
        lmax = lambda_max(prob)
        assert not np.any(coordinate_descent(prob, PenaltyMC(lmax, 3.0)).beta)
        assert np.any(coordinate_descent(prob, PenaltyMC(0.99 * lmax, 3.0)).beta)

    def test_large_gamma_is_lasso(self):
        from sklearn.linear_model import Lasso

        prob = small_problem(3, d=10)
        lam = 0.1 * lambda_max(prob)
        ours = coordinate_descent(prob, PenaltyMC(lam, 1e6), tol=1e-12).beta
        ref = Lasso(alpha=lam / prob.n, fit_intercept=False, tol=1e-12, max_iter=100_000)
        ref.fit(prob.X, prob.y)
        lasso_obj = lambda b: 0.5 * np.sum((prob.y - prob.X @ b) ** 2) + lam * np.abs(b).sum()
        assert lasso_obj(ours) == pytest.approx(lasso_obj(ref.coef_), abs=1e-6)


class TestCorrelationSets:
    def test_matches_corrcoef(self):
        prob = small_problem(4)
        sets = correlation_set(prob, 0.3)
        C = np.corrcoef(prob.X, rowvar=False)
        for j in range(prob.d):
            expect = [k for k in range(prob.d) if k != j and abs(C[j, k]) > 0.3]
            assert sets[j].tolist() == expect

    def test_all_sets(self):
        sets = all_sets(4)
        assert sets[2].tolist() == [0, 1, 3]
        assert len(sets) == 4


class TestIntervals:
    def test_partition(self):
        pen = PenaltyMC(0.5, 2.0)  # knot 1.0
        ivs = partition_intervals([0.5, -2.0, 0.0, 1.0], pen)
        # knots at 1/2, 1, 2 for |beta| = 2, 1, 0.5
        assert [(iv.lo, iv.hi) for iv in ivs] == [(0.0, 0.5), (0.5, 1.0), (1.0, 2.0), (2.0, math.inf)]
        assert [sorted(iv.active) for iv in ivs] == [[0, 1, 3], [0, 3], [0], []]

    def test_all_zero(self):
        assert partition_intervals([0.0, 0.0], PenaltyMC(1.0, 2.0)) == []

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-3, 3).filter(lambda b: abs(b) > 1e-3), min_size=1, max_size=5),
           st.floats(0.1, 1.0), st.floats(1.2, 10))
    def test_active_set_is_inside_knot(self, betas, lam, gamma):
        pen = PenaltyMC(lam, gamma)
        for iv in partition_intervals(betas, pen):
            if iv.hi <= iv.lo:
                continue  # repeated knots give empty intervals
            hi = iv.hi if math.isfinite(iv.hi) else iv.lo + 1.0
            v = 0.5 * (iv.lo + hi)
            inside = {k for k, b in enumerate(betas) if abs(v * b) <= pen.knot}
            assert set(iv.active) == inside

    def test_interval_root_is_stationary(self):
        # with b pinned at zero the v-derivative vanishes at the root
        sub = Subproblem(xa=0.2, xc=0.1, ca=0.9, cc=1.0, aa=2.0, betas=(0.5,), lam=0.1, gamma=3.0)
        spec = [s for s in build_case_specs_from(sub) if s.case == "zero"][0]
        for iv in partition_intervals(sub.betas, PenaltyMC(sub.lam, sub.gamma)):
            v = solve_v_on_interval(iv, spec, sub)
            if v is None:
                continue
            h = 1e-7
            dv = (sub.value(0.0, v + h) - sub.value(0.0, v - h)) / (2 * h)
            assert abs(dv) < 1e-6


def build_case_specs_from(sub):
    from aoescape.mcp.selective import _case_specs

    return _case_specs(sub)


class TestSelectiveScaling:
    def test_subproblem_value_matches_objective(self):
        prob, pen, j, E, beta = random_subproblem(3)
        sub, *_ = build_subproblem(j, beta, prob, pen, E)
        for b, v in [(0.0, 1.0), (0.7, -0.4), (beta[j], 1.0), (-1.2, 2.3)]:
            assert sub.value(b, v) == pytest.approx(
                scaled_objective(prob, pen, j, E, beta, b, v), abs=1e-10)

    def test_case_specs_shape(self):
        prob, pen, j, E, beta = random_subproblem(5)
        specs = build_case_specs(j, beta, prob, pen, E)
        assert [s.case for s in specs] == ["zero", "pos_inside", "pos_outside",
                                           "neg_inside", "neg_outside"]
        inside = [s for s in specs if s.case.endswith("inside")]
        assert all(s.r == pytest.approx(1 / pen.gamma) for s in inside)

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_brute_force(self, seed):
        prob, pen, j, E, beta = random_subproblem(seed)
        b, v = selective_scaling_step(j, beta, prob, pen, E)
        ours = scaled_objective(prob, pen, j, E, beta, b, v)
        assert ours <= brute_force_bv(prob, pen, j, E, beta) + 1e-6
        assert ours <= objective(beta, prob, pen) + 1e-12

    def test_empty_set_is_coordinate_update(self):
        prob, pen, j, _, beta = random_subproblem(7)
        b, v = selective_scaling_step(j, beta, prob, pen, np.array([], dtype=int))
        r = prob.y - prob.X @ beta
        assert v == 1.0
        assert b == pytest.approx(cd_update(beta[j] + prob.X[:, j] @ r, pen))

    def test_candidates_start_with_incumbent(self):
        prob, pen, j, E, beta = random_subproblem(9)
        sub, *_ = build_subproblem(j, beta, prob, pen, E)
        cands = enumerate_candidates(sub)
        assert cands[0].kind == "incumbent" and (cands[0].b, cands[0].v) == (beta[j], 1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_sweep_is_nonincreasing(self, seed):
        prob = small_problem(seed, d=12, corr=0.9)
        pen = PenaltyMC(0.1 * lambda_max(prob), 1.5)
        beta = coordinate_descent(prob, pen).beta
        trace = []
        out = scaling_escape_sweep(beta, prob, pen, correlation_set(prob, 0.3), trace=trace)
        vals = [objective(beta, prob, pen)] + trace
        assert np.all(np.diff(vals) <= 1e-10)
        assert trace[-1] == pytest.approx(objective(out, prob, pen), abs=1e-10)


@pytest.fixture(scope="module")
def surf():
    prob = small_problem(11, n=40, d=15, corr=0.9)
    lams, gams = make_grid(prob, 6, 4)
    return prob, fit_surfaces(prob, lams, gams, correlation_set(prob, 0.3),
                              EscapeConfig(max_rounds=5))


class TestSurfaces:
    def test_grid(self):
        prob = small_problem(0)
        lams, gams = make_grid(prob)
        assert lams.shape == (50,) and gams.shape == (8,)
        assert lams[0] == lambda_max(prob) and lams[-1] == pytest.approx(0.01 * lams[0])
        assert np.all(np.diff(lams) < 0) and np.all(np.diff(gams) > 0)
        assert gams[0] == 1.000001 and gams[-1] == 150.0

    def test_dominance_and_kept(self, surf):
        _, s = surf
        assert np.all(s.obj_C <= s.obj_A + 1e-12)
        np.testing.assert_array_equal(s.obj_kept, np.minimum(s.obj_B, s.obj_C))
        assert np.all(s.pct_delta_L() <= 1e-12)

    def test_objectives_recompute(self, surf):
        prob, s = surf
        i, g = 3, 1
        pen = PenaltyMC(s.lambda_grid[i], s.gamma_grid[g])
        assert objective(s.kept[i, g], prob, pen) == pytest.approx(s.obj_kept[i, g], abs=1e-12)

    def test_escape_off_reproduces_A(self):
        prob = small_problem(12, d=10)
        lams, gams = make_grid(prob, 5, 3)
        s = fit_surfaces(prob, lams, gams, correlation_set(prob, 0.3), escape=None)
        np.testing.assert_array_equal(s.B, s.A)
        np.testing.assert_array_equal(s.C, s.A)
        assert np.all(s.pct_delta_L() == 0)

    def test_summary_keys(self, surf):
        prob, s = surf
        out = summarize(s, np.zeros(prob.d))
        assert set(out) == {"small_gamma", "large_gamma", "all_gamma"}
        assert out["all_gamma"]["n_points"] == s.obj_A.size


class TestSummaries:
    def test_pct_delta(self):
        assert pct_delta(2.0, 1.5) == -0.25
        with pytest.raises(ZeroDivisionError):
            pct_delta(0.0, 1.0)

    def test_pct_delta_e_zero_baseline(self):
        assert pct_delta_e(0.0, 0.0) == 0.0
        assert math.isnan(pct_delta_e(0.0, 0.1))
        assert pct_delta_e(0.2, 0.1) == pytest.approx(-0.5)

    def test_var_sel_error(self):
        truth = np.array([1.0, 0.0, 0.0, 2.0])
        assert var_sel_error(np.array([0.5, 0.0, 1e-12, 0.0]), truth) == 0.25
        with pytest.raises(ValueError):
            var_sel_error(np.zeros(3), truth)

    def test_block_buckets(self):
        dL = np.array([0.0, -0.001, -0.005, -0.01, -0.2])
        out = summarize_block(dL, np.array([0.0, -0.5, np.nan, 0.0, 0.5]))
        assert out["fraction_improved"] == pytest.approx(0.4)
        assert out["fraction_little_difference"] == pytest.approx(0.4)
        assert out["fraction_near_zero"] == pytest.approx(0.6)
        assert out["mean_pct_delta_L_improved"] == pytest.approx(-0.105)
        assert out["fraction_pct_delta_e_zero"] == 0.5
        assert out["mean_pct_delta_e_nonzero"] == 0.0
        assert out["n_pct_delta_e_undefined"] == 1

    def test_gamma_halves(self):
        small, large = gamma_halves(8)
        assert small.tolist() == [0, 1, 2, 3] and large.tolist() == [4, 5, 6, 7]
        with pytest.warns(UserWarning, match="odd"):
            small, large = gamma_halves(5)
        assert small.size == 3 and large.size == 2


class TestSimulation:
    def test_m1(self):
        prob, beta = simulate_M1(seed=0)
        assert (prob.n, prob.d) == (100, 200)
        assert np.flatnonzero(beta).tolist() == list(range(0, 181, 20))
        np.testing.assert_allclose(np.linalg.norm(prob.X, axis=0), 1.0)
        assert abs(prob.y.sum()) < 1e-10

    def test_seeded(self):
        a, _ = simulate_M1(seed=4)
        b, _ = simulate_M1(seed=4)
        np.testing.assert_array_equal(a.X, b.X)

    def test_design_correlation(self):
        from aoescape.mcp import ar1_design

        X = ar1_design(20000, 3, 0.7, np.random.default_rng(0))
        C = np.corrcoef(X, rowvar=False)
        np.testing.assert_allclose(C[0, 1], 0.7, atol=0.02)
        np.testing.assert_allclose(C[0, 2], 0.49, atol=0.02)

    def test_coefficients_need_length(self):
        assert m1_coefficients(200).sum() == 10
        with pytest.raises(ValueError):
            simulate_M1(d=100)
