"""Treatment-effect estimators built on inverse propensity weights.

Everything here works on a :class:`~dipw.data.Dataset` whose first covariate
column is the intercept.  The pseudo-outcome ::

    Ytilde_i = T_i Y_i (1 - pi_i) / pi_i + (1 - T_i) Y_i pi_i / (1 - pi_i)

measures how the estimated propensity enters the bias of weighting, and the
correction vector ``mu`` is chosen so that covariate moments of ``Ytilde - mu``
are small.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import qr
from scipy.stats import norm

from .balance import BalanceProblem, solve_constrained, solve_lagrangian
from .data import (Dataset, DataError, DegenerateTreatmentError, FoldPlan,
                   PropensityFit)
from .rng import stream
from .sparse import cv_fit, fit_lasso

MAX_RESPLITS = 20


class HteRankError(DataError):
    pass


@dataclass(frozen=True)
class DipwConfig:
    """Tuning shared by the estimation pipelines.

    Parameters
    ----------
    B : int
        Number of split pairs for the multi-split estimator.
    kappa : float
        Trade-off in the Lagrangian correction program, in ``(0, 1)``.
    c_eta : float
        Constant in ``eta = c_eta * sqrt(log(p) / n)`` for the constrained program.
    split : {"random", "balanced"}
        Seeded random halves, or deterministic Hadamard-row halves.
    forced_pi : array, optional
        Skip the propensity fit and use these probabilities (testing aid).
    force_mu_zero : bool
        Replace every correction by zero (testing aid; reduces DIPW to IPW).
    threads : int
        Worker threads for the per-split corrections.
    """

    B: int = 3
    kappa: float = 0.5
    alpha: float = 0.05
    seed: int = 0
    cv_folds: int = 10
    grid_size: int = 100
    clip: float = 0.01
    standardize: bool = True
    c_eta: float = 1.0
    split: str = "random"
    forced_pi: Optional[NDArray] = None
    force_mu_zero: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.split not in ("random", "balanced"):
            raise ValueError("split must be 'random' or 'balanced'")
        if self.c_eta < 0:
            raise ValueError("c_eta must be non-negative")

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "B", "kappa", "alpha", "seed", "cv_folds", "grid_size", "clip",
            "standardize", "c_eta", "split", "force_mu_zero")}
        out["forced_pi"] = self.forced_pi is not None
        return out


@dataclass
class EstimateReport:
    method: str
    tau_hat: float
    per_split: list
    sigma_m_sq: float
    ci: tuple
    alpha: float
    n: int
    target: str = "ate"
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "target": self.target,
            "tau_hat": self.tau_hat,
            "per_split": list(self.per_split),
            "sigma_m_sq": self.sigma_m_sq,
            "ci": {"lo": self.ci[0], "hi": self.ci[1], "alpha": self.alpha},
            "n": self.n,
            "diagnostics": self.diagnostics,
        }


@dataclass
class HteProjection:
    W: NDArray
    beta_hat: NDArray
    lam: Optional[float] = None
    columns: Optional[list] = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": "HTE_lasso" if self.lam is not None else "HTE",
            "columns": self.columns,
            "beta_hat": self.beta_hat.tolist(),
            "lambda": self.lam,
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# estimator algebra


def transform_tilde_y(data: Dataset, fit: PropensityFit) -> NDArray:
    pi, T, Y = fit.pi_hat, data.T, data.Y
    return T * Y * (1.0 - pi) / pi + (1.0 - T) * Y * pi / (1.0 - pi)


def _summands(data, fit, mu=None):
    r = data.Y if mu is None else data.Y - np.asarray(mu)
    pi, T = fit.pi_hat, data.T
    return T * r / pi - (1.0 - T) * r / (1.0 - pi)


def estimate_ipw(data: Dataset, fit: PropensityFit) -> float:
    pi, T, Y = fit.pi_hat, data.T, data.Y
    return float(np.mean(T * Y / pi) - np.mean((1.0 - T) * Y / (1.0 - pi)))


def estimate_dipw_basic(data: Dataset, fit: PropensityFit, mu) -> float:
    pi, T = fit.pi_hat, data.T
    r = data.Y - np.asarray(mu, dtype=float)
    return float(np.mean(T * r / pi) - np.mean((1.0 - T) * r / (1.0 - pi)))


def estimate_hajek_split(data: Dataset, fit: PropensityFit, mu) -> float:
    """Inverse-propensity contrast with weights normalised to one within each arm."""
    data.require_both_arms()
    pi, T = fit.pi_hat, data.T
    r = data.Y - np.asarray(mu, dtype=float)
    w1 = T / pi
    w0 = (1.0 - T) / (1.0 - pi)
    return float(w1 @ r / w1.sum() - w0 @ r / w0.sum())


def estimate_sigma_sq(data: Dataset, fit: PropensityFit, mu, tau_hat: float) -> float:
    d = _summands(data, fit, mu) - tau_hat
    return float(np.mean(d * d))


def confidence_interval(tau_hat: float, sigma_sq: float, n: int, alpha: float = 0.05):
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * math.sqrt(sigma_sq / n)
    return (float(tau_hat - half), float(tau_hat + half))


def _values(r, X):
    if callable(r):
        return np.asarray(r(X), dtype=float)
    return np.broadcast_to(np.asarray(r, dtype=float), (X.shape[0],))


def aipw_summands(data, fit, r0_hat, r1_hat):
    r0, r1 = _values(r0_hat, data.X), _values(r1_hat, data.X)
    pi, T, Y = fit.pi_hat, data.T, data.Y
    return r1 - r0 + T * (Y - r1) / pi - (1.0 - T) * (Y - r0) / (1.0 - pi)


def estimate_aipw(data: Dataset, fit: PropensityFit,
                  r0_hat: Union[Callable, NDArray, float],
                  r1_hat: Union[Callable, NDArray, float]) -> float:
    """Doubly robust estimate; ``r0_hat``/``r1_hat`` are callables of ``X`` or fitted values."""
    return float(np.mean(aipw_summands(data, fit, r0_hat, r1_hat)))


def oracle_mu(x, truth) -> NDArray:
    """``r1(x)(1 - pi(x)) + r0(x) pi(x)`` for covariate rows ``x`` without intercept."""
    return truth.mu_oracle(x)


def _true_pi(data, truth):
    if hasattr(truth, "pi"):
        # simulated datasets carry the intercept in column 0, the truth does not
        return np.asarray(truth.pi(data.X[:, 1:]))
    return np.asarray(truth, dtype=float)


def estimate_oracle_dipw(data: Dataset, truth, mu) -> float:
    """Debiased estimate using the true propensity; ``truth`` is a ground truth or a vector of pi."""
    pi = _true_pi(data, truth)
    r = data.Y - np.asarray(mu, dtype=float)
    T = data.T
    return float(np.mean(T * r / pi - (1.0 - T) * r / (1.0 - pi)))


# ---------------------------------------------------------------------------
# nuisance fits


def fit_propensity(data: Dataset, cfg: DipwConfig = DipwConfig()):
    """Cross-validated l1-logistic propensity, or the forced vector; returns ``(fit, CvReport|None)``."""
    if cfg.forced_pi is not None:
        pi = np.asarray(cfg.forced_pi, dtype=float)
        if pi.shape != (data.n,):
            raise DataError(f"forced propensity has shape {pi.shape}, expected ({data.n},)")
        return PropensityFit.forced(pi, cfg.clip), None
    data.require_both_arms()
    folds = _fold_count(cfg.cv_folds, data.n)
    lf, report = cv_fit(data.X, data.T, "binomial", folds, cfg.grid_size,
                        standardize=cfg.standardize, rng=stream(cfg.seed, "propensity-cv"))
    return PropensityFit.from_gamma(data.X, lf.beta_hat, report.lambda_1se, cfg.clip), report


def _fold_count(folds, n):
    return max(2, min(folds, n))


def fit_regression(X, y, cfg: DipwConfig, role: str):
    """CV Lasso with the 1-SE rule; returns ``(LassoFit, CvReport)``."""
    folds = _fold_count(cfg.cv_folds, X.shape[0])
    return cv_fit(X, y, "gaussian", folds, cfg.grid_size, standardize=cfg.standardize,
                  rng=stream(cfg.seed, role))


# ---------------------------------------------------------------------------
# multi-split estimator


def make_fold_plan(data: Dataset, cfg: DipwConfig) -> tuple:
    """Draw ``B`` split pairs with both treatment arms present in every half.

    Returns ``(plan, attempts)``.
    """
    for attempt in range(MAX_RESPLITS):
        if cfg.split == "balanced":
            plan = FoldPlan.balanced(data.n, cfg.B)
        else:
            plan = FoldPlan.random(data.n, cfg.B, stream(cfg.seed, "folds", attempt))
        if all(0 < data.T[idx].sum() < len(idx) for _, idx, _ in plan.folds()):
            return plan, attempt + 1
        if cfg.split == "balanced":
            break
    raise DegenerateTreatmentError(
        f"could not split the sample so that every half holds both treatment arms "
        f"after {attempt + 1} attempt(s)")


def correct_fold(X, y_tilde, f, main, comp, kappa):
    """Centred Lagrangian correction on ``main`` with the moment target from ``comp``.

    Returns ``(mu_check, BalanceSolution)``; ``mu_check`` is recentred by the
    mean pseudo-residual of the fold.
    """
    Xm = X[main] - X[main].mean(axis=0)
    Xc = X[comp] - X[comp].mean(axis=0)
    resid_c = y_tilde[comp] - f[comp]
    target = Xc.T @ resid_c / len(comp)
    sol = solve_lagrangian(BalanceProblem(Xm, f[main], target, kappa=kappa))
    shift = float(np.mean(y_tilde[main] - f[main]))
    return sol.mu_hat + shift, sol


def _split_estimate(data, fit, y_tilde, f, pair, kappa):
    mu = np.empty(data.n)
    sols = []
    odd, even = pair
    for main, comp in ((odd, even), (even, odd)):
        mu[main], sol = correct_fold(data.X, y_tilde, f, main, comp, kappa)
        sols.append(sol)
    return mu, sols


def run_mdipw(data: Dataset, cfg: DipwConfig = DipwConfig(),
              propensity: Optional[tuple] = None) -> EstimateReport:
    """Debiased IPW with ``B`` repeated sample splits and Hajek-normalised weights.

    Parameters
    ----------
    propensity : (PropensityFit, CvReport or None), optional
        A propensity fit to reuse instead of fitting one.
    """
    data.require_both_arms()
    fit, prop_cv = propensity if propensity is not None else fit_propensity(data, cfg)
    y_tilde = transform_tilde_y(data, fit)
    f_fit, f_cv = fit_regression(data.X, y_tilde, cfg, "outcome-cv")
    f = f_fit.predict(data.X)
    plan, attempts = make_fold_plan(data, cfg)

    def one(pair):
        if cfg.force_mu_zero:
            return np.zeros(data.n), []
        return _split_estimate(data, fit, y_tilde, f, pair, cfg.kappa)

    if cfg.threads > 1 and plan.B > 1:
        with ThreadPoolExecutor(min(cfg.threads, plan.B)) as pool:
            results = list(pool.map(one, plan.pairs))
    else:
        results = [one(pair) for pair in plan.pairs]

    taus, sigmas, mu_norms, gaps = [], [], [], []
    for mu, sols in results:
        taus.append(estimate_hajek_split(data, fit, mu))
        s = _summands(data, fit, mu)
        sigmas.append(float(np.mean((s - s.mean()) ** 2)))
        mu_norms.append(float(np.max(np.abs(mu)) / math.sqrt(data.n)))
        gaps.extend(sol.certificate_gap for sol in sols)
    tau = float(np.mean(taus))
    sigma_m = float(np.mean(sigmas))
    diag = {
        "ci_kind": "upper_bound",
        "B": plan.B,
        "kappa": cfg.kappa,
        "split_attempts": attempts,
        "clip": fit.clip,
        "clip_events": fit.n_clipped(),
        "lambda_propensity": None if prop_cv is None else fit.lam,
        "lambda_outcome": f_fit.lam,
        "mu_inf_over_sqrt_n": mu_norms,
        "per_split_sigma_sq": sigmas,
        "fallback_zero": 0,
        "max_certificate_gap": max(gaps, default=0.0),
    }
    return EstimateReport("mDIPW", tau, taus, sigma_m,
                          confidence_interval(tau, sigma_m, data.n, cfg.alpha),
                          cfg.alpha, data.n, diagnostics=diag)


def default_eta(p: int, n: int, c_eta: float = 1.0) -> float:
    return c_eta * math.sqrt(math.log(p) / n)


def run_dipw_basic(data: Dataset, cfg: DipwConfig = DipwConfig(),
                   propensity: Optional[tuple] = None) -> EstimateReport:
    """Single-split debiased IPW with the constrained correction program.

    Each half is corrected using the other half as auxiliary sample; the
    estimate is the unnormalised debiased average over all rows.
    """
    data.require_both_arms()
    fit, _ = propensity if propensity is not None else fit_propensity(data, cfg)
    mu = np.zeros(data.n)
    fallbacks = 0
    if not cfg.force_mu_zero:
        y_tilde = transform_tilde_y(data, fit)
        f_fit, _ = fit_regression(data.X, y_tilde, cfg, "outcome-cv")
        f = f_fit.predict(data.X)
        plan, _ = make_fold_plan(data, replace(cfg, B=1))
        odd, even = plan.pairs[0]
        for main, comp in ((odd, even), (even, odd)):
            target = data.X[comp].T @ (y_tilde[comp] - f[comp]) / len(comp)
            eta = default_eta(data.p, len(main), cfg.c_eta)
            sol = solve_constrained(BalanceProblem(data.X[main], f[main], target, eta=eta))
            mu[main] = sol.mu_hat
            fallbacks += sol.fallback_zero
    tau = estimate_dipw_basic(data, fit, mu)
    sig = estimate_sigma_sq(data, fit, mu, tau)
    diag = {"clip": fit.clip, "clip_events": fit.n_clipped(), "fallback_zero": fallbacks,
            "mu_inf_over_sqrt_n": [float(np.max(np.abs(mu)) / math.sqrt(data.n))]}
    return EstimateReport("DIPW_basic", tau, [tau], sig,
                          confidence_interval(tau, sig, data.n, cfg.alpha),
                          cfg.alpha, data.n, diagnostics=diag)


def run_ipw(data: Dataset, cfg: DipwConfig = DipwConfig(),
            propensity: Optional[tuple] = None) -> EstimateReport:
    data.require_both_arms()
    fit, _ = propensity if propensity is not None else fit_propensity(data, cfg)
    tau = estimate_ipw(data, fit)
    sig = estimate_sigma_sq(data, fit, np.zeros(data.n), tau)
    return EstimateReport("IPW", tau, [tau], sig,
                          confidence_interval(tau, sig, data.n, cfg.alpha), cfg.alpha, data.n,
                          diagnostics={"clip": fit.clip, "clip_events": fit.n_clipped()})


def fit_arm_regressions(data: Dataset, cfg: DipwConfig):
    """Per-arm CV Lasso outcome models; returns ``(r0_values, r1_values)`` on all rows."""
    out = []
    for arm in (0.0, 1.0):
        rows = data.T == arm
        Xa, Ya = data.X[rows], data.Y[rows]
        if rows.sum() < 3:
            out.append(np.full(data.n, Ya.mean()))
            continue
        lf, _ = fit_regression(Xa, Ya, cfg, f"arm{int(arm)}-cv")
        out.append(lf.predict(data.X))
    return out[0], out[1]


def run_aipw(data: Dataset, cfg: DipwConfig = DipwConfig(),
             propensity: Optional[tuple] = None) -> EstimateReport:
    data.require_both_arms()
    fit, _ = propensity if propensity is not None else fit_propensity(data, cfg)
    r0, r1 = fit_arm_regressions(data, cfg)
    s = aipw_summands(data, fit, r0, r1)
    tau = float(np.mean(s))
    sig = float(np.mean((s - tau) ** 2))
    return EstimateReport("AIPW", tau, [tau], sig,
                          confidence_interval(tau, sig, data.n, cfg.alpha), cfg.alpha, data.n,
                          diagnostics={"clip": fit.clip, "clip_events": fit.n_clipped()})


METHODS = {
    "mdipw": run_mdipw,
    "ipw": run_ipw,
    "aipw": run_aipw,
    "dipw-basic": run_dipw_basic,
}


def estimate(data: Dataset, method: str = "mdipw", cfg: DipwConfig = DipwConfig(),
             propensity: Optional[tuple] = None) -> EstimateReport:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(data, cfg, propensity)


# ---------------------------------------------------------------------------
# extensions


def estimate_potential_variance(data: Dataset, cfg: DipwConfig = DipwConfig(),
                                method: str = "mdipw",
                                propensity: Optional[tuple] = None) -> EstimateReport:
    """Two-stage estimate of ``Var(Y(1))``.

    Stage one estimates ``E Y(1)`` by running ``method`` on the outcome ``Y T``;
    stage two runs it on ``(Y - stage_one)^2 T``.  The stage-one value is plugged
    in without propagating its uncertainty.  Both stages share one propensity fit.
    """
    data.require_both_arms()
    prop = propensity if propensity is not None else fit_propensity(data, cfg)
    first = estimate(data.with_outcome(data.Y * data.T), method, cfg, prop)
    second = estimate(data.with_outcome((data.Y - first.tau_hat) ** 2 * data.T), method, cfg, prop)
    treated = data.Y[data.T == 1.0]
    second.target = "var_y1"
    second.diagnostics["stage1_tau_hat"] = first.tau_hat
    second.diagnostics["naive_treated_var"] = float(np.var(treated, ddof=1)) if len(treated) > 1 else 0.0
    return second


def hte_pseudo_outcomes(data: Dataset, fit: PropensityFit, mu) -> NDArray:
    return _summands(data, fit, mu)


def _collinear_columns(W, names):
    _, R, piv = qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max(initial=0.0) * max(W.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    return [names[j] for j in sorted(piv[rank:])]


def project_hte(data: Dataset, fit: PropensityFit, mu, W=None, lasso: bool = False,
                lam: Optional[float] = None, columns: Optional[Sequence[str]] = None,
                cfg: DipwConfig = DipwConfig()) -> HteProjection:
    """Project the debiased pseudo-outcomes onto ``W``.

    With ``lasso=True`` the projection features are all of ``X`` and the fit is an
    l1-penalised regression (penalty ``lam``, cross-validated when omitted).
    """
    phi = hte_pseudo_outcomes(data, fit, mu)
    if lasso:
        if lam is None:
            lf, _ = fit_regression(data.X, phi, cfg, "hte-cv")
        else:
            lf = fit_lasso(data.X, phi, lam)
        return HteProjection(data.X, lf.beta_hat, lf.lam, columns or data.feature_names)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != data.n:
        raise DataError(f"W has {W.shape[0]} rows, data has {data.n}")
    names = list(columns) if columns is not None else [f"w{j}" for j in range(W.shape[1])]
    bad = _collinear_columns(W, names)
    if bad:
        raise HteRankError(f"projection covariates are rank deficient; collinear column(s): {bad}")
    beta, *_ = np.linalg.lstsq(W, phi, rcond=None)
    return HteProjection(W, beta, None, names)


def hte_moments(W, X):
    """Moment matrix with columns ``W_j * X_l`` (``n x d*p``)."""
    return (W[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)


def run_hte(data: Dataset, W, cfg: DipwConfig = DipwConfig(), columns=None,
            lasso: bool = False, lam: Optional[float] = None) -> HteProjection:
    """Cross-fitted correction under the weighted-moment constraint, then projection on ``W``."""
    data.require_both_arms()
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    fit, _ = fit_propensity(data, cfg)
    y_tilde = transform_tilde_y(data, fit)
    f_fit, _ = fit_regression(data.X, y_tilde, cfg, "outcome-cv")
    f = f_fit.predict(data.X)
    mu = np.zeros(data.n)
    fallbacks = 0
    if not cfg.force_mu_zero:
        plan, _ = make_fold_plan(data, replace(cfg, B=1))
        odd, even = plan.pairs[0]
        for main, comp in ((odd, even), (even, odd)):
            Mc = hte_moments(W[comp], data.X[comp])
            target = Mc.T @ (y_tilde[comp] - f[comp]) / len(comp)
            eta = default_eta(data.p, len(main), cfg.c_eta)
            sol = solve_constrained(BalanceProblem(hte_moments(W[main], data.X[main]),
                                                   f[main], target, eta=eta))
            mu[main] = sol.mu_hat
            fallbacks += sol.fallback_zero
    proj = project_hte(data, fit, mu, W, lasso=lasso, lam=lam, columns=columns, cfg=cfg)
    proj.diagnostics.update({"fallback_zero": fallbacks, "clip_events": fit.n_clipped()})
    return proj
