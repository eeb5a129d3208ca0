import numpy as np
import pytest

from dipw.rng import derived_seed, stream
from dipw.simgen import (SUPPORT_SIZE, DesignError, GroundTruth, SimulationDesign, covariance,
                         gen_coefficients, gen_covariates, gen_outcomes, mvn_rows, noise_sd,
                         simulate, true_tau, true_var_y1, _cholesky)


class TestCovariance:

    def test_toeplitz_monte_carlo(self):
        L = _cholesky(5, "toeplitz", 0.9)
        X = mvn_rows(100_000, L, stream(1, "test"))
        prod = X[:, 0] * X[:, 1]
        se = prod.std(ddof=1) / np.sqrt(len(prod))
        assert abs(prod.mean() - 0.9) < 3 * se

    def test_toeplitz_entries(self):
        S = covariance(6, "toeplitz", 0.9)
        assert S[0, 3] == pytest.approx(0.9 ** 3)

    def test_expdecay_unit_diagonal(self):
        S = covariance(30, "expdecay", 0.9)
        np.testing.assert_array_equal(np.diag(S), 1.0)
        np.linalg.cholesky(S)

    def test_reproducible(self):
        d = SimulationDesign(n=20, p=50, seed=3)
        a = gen_covariates(d, rep=2)
        b = gen_covariates(d, rep=2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, gen_covariates(d, rep=3))

    def test_user_csv(self, tmp_path):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((30, 60)) * np.linspace(0.1, 3, 60)
        f = tmp_path / "cov.csv"
        np.savetxt(f, M, delimiter=",", header=",".join(f"g{j}" for j in range(60)), comments="")
        d = SimulationDesign(n=20, p=50, cov="usercsv", cov_path=str(f), seed=1)
        X = gen_covariates(d)
        keep = np.sort(np.argsort(-M.var(axis=0))[:50])
        np.testing.assert_allclose(X, M[:20, keep], rtol=1e-15)
        sim = simulate(d)
        assert sim.X.shape == (20, 50)


class TestCoefficients:

    @pytest.mark.parametrize("dg", [1, 5, 50])
    def test_supports_and_norms(self, dg):
        t = gen_coefficients(SimulationDesign(p=120, d_gamma=dg, seed=4))
        sb, sg = set(np.flatnonzero(t.beta)), set(np.flatnonzero(t.gamma))
        assert len(sb) == SUPPORT_SIZE and len(np.flatnonzero(t.delta)) == SUPPORT_SIZE
        assert len(sg) == dg and sg <= sb
        assert np.linalg.norm(t.beta) == pytest.approx(2.0, abs=1e-12)
        assert np.linalg.norm(t.delta) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(t.gamma) == pytest.approx(1.0, abs=1e-12)

    def test_raw_values_uniform(self):
        design = SimulationDesign(p=80, seed=5)
        t = gen_coefficients(design, rng=stream(9, "x"))
        rng = stream(9, "x")
        supp = np.sort(rng.choice(80, SUPPORT_SIZE, replace=False))
        raw = rng.uniform(0.0, 1.0, SUPPORT_SIZE)
        assert np.all((raw >= 0) & (raw <= 1))
        np.testing.assert_allclose(t.beta[supp], raw * 2.0 / np.linalg.norm(raw), rtol=1e-14)

    def test_design_validation(self):
        with pytest.raises(DesignError):
            SimulationDesign(p=40)
        with pytest.raises(DesignError):
            SimulationDesign(p=100, d_gamma=60)
        with pytest.raises(DesignError):
            SimulationDesign(cov="usercsv")


class TestOutcomes:

    def test_noise_free_control(self):
        design = SimulationDesign(n=30, p=50, sigma=0.0, seed=6)
        t = gen_coefficients(design)
        X = gen_covariates(design)
        Y, T = gen_outcomes(X, t, design, force_T=0)
        np.testing.assert_array_equal(T, 0.0)
        np.testing.assert_allclose(Y, X @ t.beta, atol=1e-14)

    def test_nonlinear_delta_zero_index(self):
        t = GroundTruth(np.zeros(2), np.array([1.0, -1.0]), np.zeros(2), effect="nonlinear")
        assert t.Delta(np.array([[0.7, 0.7]]))[0] == 0.0

    def test_heteroscedastic_variance(self):
        design = SimulationDesign(n=100_000, p=50, noise="heteroscedastic", seed=7)
        pi = np.full(100_000, 0.7)
        eps = stream(8, "eps").standard_normal(100_000) * noise_sd(design, pi)
        v = eps.var(ddof=1)
        se = v * np.sqrt(2.0 / (len(eps) - 1))
        assert abs(v - 0.5) < 3 * se
        assert noise_sd(design, np.array([0.2]))[0] == pytest.approx(np.sqrt(2.0))

    def test_treatment_frequency(self):
        design = SimulationDesign(n=4000, p=50, seed=8)
        sim = simulate(design)
        assert abs(sim.T.mean() - sim.truth.pi(sim.X).mean()) < 4 * 0.5 / np.sqrt(4000)


class TestTruth:

    def test_linear_zero(self):
        t = gen_coefficients(SimulationDesign(p=60, seed=9))
        assert true_tau(t, SimulationDesign(p=60, seed=9)) == (0.0, 0.0)

    def test_nonlinear_zero_delta(self):
        d = SimulationDesign(p=60, effect="nonlinear", seed=9)
        t = gen_coefficients(d)
        t.delta[:] = 0.0
        assert true_tau(t, d)[0] == 0.0

    def test_nonlinear_monte_carlo(self):
        d = SimulationDesign(p=60, effect="nonlinear", seed=10)
        t = gen_coefficients(d)
        a, se = true_tau(t, d, mc_draws=1_000_000)
        b, _ = true_tau(t, d, mc_draws=1_000_000)
        assert se < 1e-3 and a == b
        # logistic(-u) - 1/2 is odd in u, and u is a centred Gaussian
        assert abs(a) < 3 * se

    def test_tau_bar_band(self):
        d = SimulationDesign(n=400, p=60, seed=11)
        sim = simulate(d)
        sd = np.sqrt(sim.truth.delta @ covariance(60, "toeplitz", 0.9) @ sim.truth.delta)
        assert abs(sim.tau_bar - sim.truth.tau) < 4 * sd / np.sqrt(400)

    def test_var_closed_form_vs_monte_carlo(self):
        d = SimulationDesign(n=100, p=50, noise="heteroscedastic", seed=12)
        t = gen_coefficients(d)
        closed = t.var_y1
        # independent draw of Var(Y(1)) straight from the generator's formulas
        X = mvn_rows(1_000_000, _cholesky(50, "toeplitz", 0.9), stream(3, "mc"))
        r1 = X @ (t.beta + t.delta)
        nv = noise_sd(d, t.pi(X)) ** 2
        mc = r1.var() + nv.mean()
        assert closed == pytest.approx(mc, rel=5e-3)
        assert closed == pytest.approx(true_var_y1(t, d))


class TestDesignConfig:

    def test_text_round_trip(self):
        d = SimulationDesign(n=50, p=70, rho=0.5, noise="heteroscedastic", seed=3)
        assert SimulationDesign.from_text(d.to_text()) == d

    def test_unknown_key(self):
        with pytest.raises(DesignError):
            SimulationDesign.from_text("n=10\nfoo=1\n")

    def test_simulate_deterministic(self):
        d = SimulationDesign(n=40, p=50, seed=13)
        a, b = simulate(d, 4), simulate(d, 4)
        np.testing.assert_array_equal(a.Y, b.Y)
        np.testing.assert_array_equal(a.truth.gamma, b.truth.gamma)

    def test_streams_independent_of_order(self):
        d = SimulationDesign(n=40, p=50, seed=14)
        late = simulate(d, 9).Y
        for r in range(3):
            simulate(d, r)
        np.testing.assert_array_equal(simulate(d, 9).Y, late)

    def test_derived_seed(self):
        assert derived_seed(1, "a", 2) == derived_seed(1, "a", 2)
        assert derived_seed(1, "a", 2) != derived_seed(1, "a", 3)
