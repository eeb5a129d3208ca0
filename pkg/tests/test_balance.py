import numpy as np
import pytest
from hypothesis import given, strategies as st

from dipw.balance import (BalanceInputError, BalanceProblem, BalanceSolution, certify,
                          solve_constrained, solve_lagrangian)

from reference import constrained_ref, lagrangian_ref, random_problem


class TestConstrained:

    def test_interior_point_returned(self):
        rng = np.random.default_rng(0)
        X, f, v = random_problem(rng, 8, 3)
        prob = BalanceProblem(X, f, v, eta=10 * np.abs(v).max() + 1)
        sol = solve_constrained(prob)
        np.testing.assert_array_equal(sol.mu_hat, f)
        assert sol.objective == 0.0

    @pytest.mark.parametrize("v,eta", [(2.0, 0.5), (-3.0, 1.0), (0.3, 0.5), (0.5, 0.5), (-1.0, 0.0)])
    def test_scalar_closed_form(self, v, eta):
        prob = BalanceProblem(np.ones((1, 1)), [0.0], [v], eta=eta)
        sol = solve_constrained(prob)
        expect = v - eta if v > eta else (v + eta if v < -eta else 0.0)
        assert sol.mu_hat[0] == pytest.approx(expect, abs=1e-10)
        assert certify(prob, sol) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_small_against_reference(self, seed):
        rng = np.random.default_rng(100 + seed)
        X, f, v = random_problem(rng, 6, 4)
        eta = 0.2
        sol = solve_constrained(BalanceProblem(X, f, v, eta=eta))
        ref, val = constrained_ref(X, f, v, eta)
        assert not sol.fallback_zero
        assert np.max(np.abs(sol.mu_hat - ref)) < 1e-5
        assert sol.objective == pytest.approx(val, rel=1e-6)

    def test_feasible_start_never_falls_back(self):
        rng = np.random.default_rng(3)
        X, f, _ = random_problem(rng, 20, 30)
        y = rng.standard_normal(20)
        v = X.T @ (y - f) / 20
        sol = solve_constrained(BalanceProblem(X, f, v, eta=1e-3))
        assert not sol.fallback_zero
        assert sol.feasibility_residual <= 1e-6

    def test_infeasible_falls_back_to_zero(self):
        # duplicated moment column with contradictory targets
        X = np.column_stack([np.ones(5), np.arange(5.0), np.arange(5.0)])
        sol = solve_constrained(BalanceProblem(X, np.ones(5), [0.0, 1.0, -1.0], eta=0.1))
        assert sol.fallback_zero
        np.testing.assert_array_equal(sol.mu_hat, 0.0)

    def test_translation(self):
        # shifting f and target consistently moves the solution by the same shift
        rng = np.random.default_rng(4)
        X, f, v = random_problem(rng, 12, 5)
        c = 2.5
        a = solve_constrained(BalanceProblem(X, f, v, eta=0.1))
        b = solve_constrained(BalanceProblem(X, f + c, v, eta=0.1))
        np.testing.assert_allclose(b.mu_hat, a.mu_hat + c, atol=1e-7)

    @given(st.integers(0, 10_000), st.floats(0.01, 1.0))
    def test_feasible_output(self, seed, eta):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 15))
        p = int(rng.integers(1, n))
        X, f, v = random_problem(rng, n, p)
        prob = BalanceProblem(X, f, v, eta=eta)
        sol = solve_constrained(prob)
        assert not sol.fallback_zero
        assert np.max(np.abs(prob.residual(sol.mu_hat))) <= eta + 1e-6 * (1 + np.abs(v).max())
        assert sol.certificate_gap < 1e-5

    def test_input_validation(self):
        with pytest.raises(BalanceInputError, match="rows"):
            BalanceProblem(np.ones((3, 2)), np.ones(4), np.ones(2), eta=1.0)
        with pytest.raises(BalanceInputError, match="columns"):
            BalanceProblem(np.ones((3, 2)), np.ones(3), np.ones(3), eta=1.0)
        with pytest.raises(BalanceInputError):
            BalanceProblem(np.ones((3, 2)), np.ones(3), np.ones(2))
        with pytest.raises(BalanceInputError):
            BalanceProblem(np.ones((3, 2)), np.ones(3), np.ones(2), kappa=1.0)


class TestLagrangian:

    def test_consistent_fold_zero_objective(self):
        rng = np.random.default_rng(5)
        X, f, _ = random_problem(rng, 10, 4)
        sol = solve_lagrangian(BalanceProblem(X, f, np.zeros(4), kappa=0.5))
        np.testing.assert_allclose(sol.mu_hat, f, atol=1e-12)
        assert sol.objective < 1e-20

    @pytest.mark.parametrize("seed", range(5))
    def test_against_reference(self, seed):
        rng = np.random.default_rng(200 + seed)
        X, f, v = random_problem(rng, 5, 3)
        prob = BalanceProblem(X, f, v, kappa=0.5)
        sol = solve_lagrangian(prob)
        ref, val = lagrangian_ref(X, f, v, 0.5)
        assert abs(sol.objective - val) / abs(val) < 1e-5
        assert sol.diagnostics["duality_gap"] < 1e-9 * (1 + val)

    def test_kappa_to_one_grid(self):
        # two observations, three moments: max-of-squares alone has a positive minimum
        X = np.array([[1.0, 0.5, -1.0], [1.0, -2.0, 0.3]])
        f = np.array([0.2, -0.4])
        v = np.array([0.3, -0.8, 0.6])
        prob = BalanceProblem(X, f, v, kappa=1 - 1e-4)
        sol = solve_lagrangian(prob)
        assert sol.diagnostics["status"] == "converged"
        g = np.round(np.arange(-3.0, 3.0005, 1e-3), 10)
        best = np.inf
        for i in range(0, g.size, 500):
            m1 = g[i:i + 500, None, None]
            m2 = g[None, :, None]
            r = v - (X[0] * (m1 - f[0]) + X[1] * (m2 - f[1])) / 2
            best = min(best, float(np.max(np.abs(r), axis=2).min()))
        got = float(np.max(np.abs(prob.residual(sol.mu_hat))))
        assert got <= best + 1e-12
        assert got >= best - 5e-3
        assert np.all(np.abs(sol.mu_hat) <= 3.0)

    @given(st.integers(0, 10_000), st.floats(0.05, 0.95))
    def test_certificate_and_gap(self, seed, kappa):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 12))
        p = int(rng.integers(1, 8))
        X, f, v = random_problem(rng, n, p)
        sol = solve_lagrangian(BalanceProblem(X, f, v, kappa=kappa))
        assert sol.certificate_gap < 1e-6
        assert sol.diagnostics["duality_gap"] < 1e-8 * (1 + sol.objective)


class TestCertify:

    def test_exact_scalar(self):
        prob = BalanceProblem(np.ones((1, 1)), [0.0], [2.0], eta=0.5)
        sol = BalanceSolution(np.array([1.5]), 2.25, 0.0, 0.0)
        assert certify(prob, sol) < 1e-9

    @pytest.mark.parametrize("form", ["constrained", "lagrangian"])
    def test_perturbation_detected(self, form):
        rng = np.random.default_rng(6)
        X, f, v = random_problem(rng, 8, 3)
        if form == "constrained":
            prob = BalanceProblem(X, f, v, eta=0.05)
            sol = solve_constrained(prob)
        else:
            prob = BalanceProblem(X, f, v, kappa=0.5)
            sol = solve_lagrangian(prob)
        base = certify(prob, sol)
        bumped = BalanceSolution(sol.mu_hat + 0.1 * np.eye(8)[2], 0.0, 0.0, 0.0, form=form)
        assert certify(prob, bumped) > max(base, 1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_small_gap_means_close(self, seed):
        rng = np.random.default_rng(300 + seed)
        X, f, v = random_problem(rng, 6, 4)
        prob = BalanceProblem(X, f, v, eta=0.15)
        sol = solve_constrained(prob)
        ref, _ = constrained_ref(X, f, v, 0.15)
        if certify(prob, sol) < 1e-6:
            assert np.max(np.abs(sol.mu_hat - ref)) < 1e-4
