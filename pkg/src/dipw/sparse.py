"""l1-penalised least squares and logistic regression with cross-validated tuning.

Objectives (column 0 of ``X`` is the unpenalised intercept)::

    gaussian:  ||y - X b||^2 / n + lam * sum_{j>=1} w_j |b_j|
    binomial:  (1/n) sum_i [log(1 + exp(x_i'b)) - t_i x_i'b] + lam * sum_{j>=1} w_j |b_j|

With ``standardize=True`` (the default) ``w_j`` is the population standard
deviation of column ``j``, i.e. the penalty is applied to coefficients of
unit-variance columns; with ``standardize=False`` all ``w_j = 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from numpy.typing import NDArray

from ._cd import logistic_newton, quad_l1_cd
from .data import DataError, DipwError

TOL_KKT = 1e-7
MAX_ITER = 100_000
SEPARATION_BOUND = 1e3
# cross-validation paths stop once this fraction of null deviance is explained
DEV_RATIO_STOP = 0.999
# held-out error is insensitive to solver error at this level
TOL_KKT_CV = 1e-4

Family = Literal["gaussian", "binomial"]


class ConvergenceError(DipwError):
    def __init__(self, message, kkt_residual):
        super().__init__(f"{message} (last KKT residual {kkt_residual:.3e})")
        self.kkt_residual = kkt_residual


class SeparationWarning(UserWarning):
    pass


@dataclass
class LassoFit:
    beta_hat: NDArray
    lam: float
    objective: float
    n_iter: int
    kkt_residual: float = 0.0
    separation: bool = False

    def predict(self, X):
        return np.asarray(X) @ self.beta_hat


@dataclass
class CvReport:
    lambda_grid: NDArray
    cv_mean: NDArray
    cv_se: NDArray
    lambda_min: float
    lambda_1se: float
    folds: int
    family: str = "gaussian"

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "folds": self.folds,
            "lambda_min": self.lambda_min,
            "lambda_1se": self.lambda_1se,
            "lambda_grid": self.lambda_grid.tolist(),
            "cv_mean": self.cv_mean.tolist(),
            "cv_se": self.cv_se.tolist(),
        }


class _Standardized:
    """Centred and scaled copy of the penalised columns, plus back-transform."""

    def __init__(self, X, standardize=True):
        X = np.asarray(X, dtype=float)
        self.n, self.p = X.shape
        self.mean = X[:, 1:].mean(axis=0)
        sd = X[:, 1:].std(axis=0)
        self.keep = sd > 1e-12 * np.maximum(1.0, np.abs(self.mean))
        self.sd = np.where(self.keep, sd, 1.0)
        Z = np.empty_like(X)
        Z[:, 0] = 1.0
        Z[:, 1:] = (X[:, 1:] - self.mean) / self.sd
        Z[:, 1:][:, ~self.keep] = 0.0
        self.Z = Z
        w = np.ones(self.p)
        w[0] = 0.0
        if not standardize:
            w[1:] = 1.0 / self.sd
        self.weights = w

    def to_original(self, bz):
        b = np.empty_like(bz)
        b[1:] = np.where(self.keep, bz[1:] / self.sd, 0.0)
        b[0] = bz[0] - self.mean @ b[1:]
        return b

    def to_internal(self, b):
        bz = np.empty_like(b)
        bz[1:] = b[1:] * self.sd
        bz[0] = b[0] + self.mean @ b[1:]
        return bz


def penalty_weights(X, standardize=True):
    """Per-coefficient penalty weights on the original scale (0 for the intercept)."""
    X = np.asarray(X, dtype=float)
    w = np.zeros(X.shape[1])
    w[1:] = X[:, 1:].std(axis=0) if standardize else 1.0
    return w


def gaussian_objective(X, y, b, lam, standardize=True):
    r = y - X @ b
    return r @ r / len(y) + lam * penalty_weights(X, standardize) @ np.abs(b)


def binomial_objective(X, t, b, lam, standardize=True):
    eta = X @ b
    return (np.mean(np.logaddexp(0.0, eta) - t * eta)
            + lam * penalty_weights(X, standardize) @ np.abs(b))


def gaussian_lambda_max(X, y, standardize=True):
    s = _Standardized(X, standardize)
    g = 2.0 * s.Z.T @ (y - y.mean()) / s.n
    return _lambda_max_from_grad(g, s)


def binomial_lambda_max(X, t, standardize=True):
    s = _Standardized(X, standardize)
    g = s.Z.T @ (t - t.mean()) / s.n
    return _lambda_max_from_grad(g, s)


def _lambda_max_from_grad(g, s):
    w = s.weights[1:]
    ok = s.keep & (w > 0)
    if not np.any(ok):
        return 0.0
    return float(np.max(np.abs(g[1:][ok]) / w[ok]))


def _gaussian_path(s, y, lambdas, tol, max_iter, bz=None, dev_stop=None):
    n = s.n
    G = 2.0 * (s.Z.T @ s.Z) / n
    q = 2.0 * (s.Z.T @ y) / n
    null_dev = np.sum((y - y.mean()) ** 2)
    # the gradient scales with y, so the KKT tolerance does too
    tol = tol * max(1.0, float(y.std()))
    bz = np.zeros(s.p) if bz is None else bz.copy()
    out = []
    for lam in lambdas:
        lamv = lam * s.weights
        sweeps, kkt, status = quad_l1_cd(G, q, lamv, bz, tol, max_iter, np.inf)
        if status != 0:
            raise ConvergenceError(f"lasso did not converge at lambda={lam:.4g}", kkt)
        b = s.to_original(bz)
        out.append(LassoFit(b, float(lam), float("nan"), int(sweeps), float(kkt)))
        if dev_stop is not None and null_dev > 0:
            r = y - s.Z @ bz
            if 1.0 - (r @ r) / null_dev >= dev_stop:
                break
    return out


def fit_lasso(X, y, lam: float, tol: float = TOL_KKT, max_iter: int = MAX_ITER,
              standardize: bool = True) -> LassoFit:
    """Lasso fit at a single penalty by coordinate descent with covariance updates."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    s = _Standardized(X, standardize)
    fit = _gaussian_path(s, y, [lam], tol, max_iter)[0]
    fit.objective = float(gaussian_objective(X, y, fit.beta_hat, lam, standardize))
    return fit


def lasso_path(X, y, lambdas, tol=TOL_KKT, max_iter=MAX_ITER, standardize=True):
    """Warm-started fits along a decreasing penalty sequence."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    fits = _gaussian_path(_Standardized(X, standardize), y, lambdas, tol, max_iter)
    for f in fits:
        f.objective = float(gaussian_objective(X, y, f.beta_hat, f.lam, standardize))
    return fits


def _logistic_newton(Z, t, lamv, bz, tol, max_iter):
    n_iter, kkt, status = logistic_newton(np.ascontiguousarray(Z), t, lamv, bz, tol,
                                          max_iter, SEPARATION_BOUND)
    if status == 1:
        raise ConvergenceError("logistic lasso did not converge", kkt)
    return n_iter, kkt, status == 2


def _kkt(g, lamv, b):
    nz = b != 0
    r = np.where(nz, np.abs(g + lamv * np.sign(b)), np.maximum(np.abs(g) - lamv, 0.0))
    return float(r.max())


def _binomial_path(s, t, lambdas, tol, max_iter, bz=None, dev_stop=None):
    tm = np.clip(t.mean(), 1e-10, 1 - 1e-10)
    null_dev = -2.0 * np.sum(t * np.log(tm) + (1 - t) * np.log(1 - tm))
    if bz is None:
        tbar = np.clip(t.mean(), 1e-10, 1 - 1e-10)
        bz = np.zeros(s.p)
        bz[0] = np.log(tbar / (1.0 - tbar))
    else:
        bz = bz.copy()
    out = []
    for lam in lambdas:
        n_iter, kkt, sep = _logistic_newton(s.Z, t, lam * s.weights, bz, tol, max_iter)
        if sep:
            warnings.warn(
                f"coefficients exceeded the separation guard at lambda={lam:.4g}; "
                "returning the fit at the guard boundary",
                SeparationWarning, stacklevel=3,
            )
        out.append(LassoFit(s.to_original(bz), float(lam), float("nan"), n_iter, kkt, sep))
        if sep:
            break
        if dev_stop is not None:
            eta = s.Z @ bz
            dev = 2.0 * np.sum(np.logaddexp(0.0, eta) - t * eta)
            if 1.0 - dev / null_dev >= dev_stop:
                break
    return out


def _check_binary(t):
    if np.any((t != 0) & (t != 1)):
        raise DataError("binomial response must be 0/1")
    if t.min() == t.max():
        raise DataError("binomial response has a single class")


def fit_logistic_lasso(X, t, lam: float, tol: float = TOL_KKT, max_iter: int = MAX_ITER,
                       standardize: bool = True) -> LassoFit:
    """l1-penalised logistic regression (unpenalised intercept) by proximal Newton."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_binary(t)
    s = _Standardized(X, standardize)
    fit = _binomial_path(s, t, [lam], tol, max_iter)[0]
    fit.objective = float(binomial_objective(X, t, fit.beta_hat, lam, standardize))
    return fit


def logistic_lasso_path(X, t, lambdas, tol=TOL_KKT, max_iter=MAX_ITER, standardize=True):
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_binary(t)
    fits = _binomial_path(_Standardized(X, standardize), t, lambdas, tol, max_iter)
    for f in fits:
        f.objective = float(binomial_objective(X, t, f.beta_hat, f.lam, standardize))
    return fits


def lambda_grid(lam_max: float, grid_size: int = 100, ratio: float = 1e-3):
    if lam_max <= 0:
        lam_max = 1e-8
    return np.geomspace(lam_max, ratio * lam_max, grid_size)


def assign_folds(n, folds, rng, strata=None):
    """Fold labels ``0..folds-1``; round-robin within each stratum of a random permutation."""
    labels = np.empty(n, dtype=np.int64)
    if strata is None:
        perm = rng.permutation(n)
        labels[perm] = np.arange(n) % folds
        return labels
    offset = 0
    for level in np.unique(strata):
        idx = np.flatnonzero(strata == level)
        idx = idx[rng.permutation(idx.size)]
        labels[idx] = (offset + np.arange(idx.size)) % folds
        offset += idx.size
    return labels


def one_se_rule(lambda_grid, cv_mean, cv_se):
    """Return ``(lambda_min, lambda_1se)`` for a decreasing grid."""
    i_min = int(np.argmin(cv_mean))
    bound = cv_mean[i_min] + cv_se[i_min]
    i_1se = int(np.flatnonzero(cv_mean <= bound)[0])
    return float(lambda_grid[i_min]), float(lambda_grid[i_1se])


def cv_select(X, y, family: Family = "gaussian", folds: int = 10, grid_size: int = 100,
              seed: int = 0, standardize: bool = True, tol: float = TOL_KKT_CV,
              rng: Optional[np.random.Generator] = None) -> CvReport:
    """K-fold cross-validation over a log-spaced grid with the one-standard-error rule.

    CV error is mean squared error (gaussian) or mean binomial deviance.  Folds are
    stratified by class for the binomial family.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(seed))
    if family == "binomial":
        _check_binary(y)
        counts = np.bincount(y.astype(int), minlength=2)
        if counts.min() < 2:
            raise DataError("cannot form cross-validation folds: a class has fewer than 2 members")
        labels = assign_folds(n, folds, rng, strata=y)
        lam_max = binomial_lambda_max(X, y, standardize)
    elif family == "gaussian":
        labels = assign_folds(n, folds, rng)
        lam_max = gaussian_lambda_max(X, y, standardize)
    else:
        raise ValueError(f"unknown family {family!r}")
    grid = lambda_grid(lam_max, grid_size)
    path_fn = _binomial_path if family == "binomial" else _gaussian_path

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        # the full-data path bounds the usable grid, as do the fold paths below
        full = path_fn(_Standardized(X, standardize), y, grid, tol, MAX_ITER,
                       dev_stop=DEV_RATIO_STOP)
        length = len(full)
        grid = grid[:length]
        errs = np.full((folds, length), np.nan)
        sizes = np.zeros(folds)
        for k in range(folds):
            test = labels == k
            train = ~test
            sizes[k] = test.sum()
            path = path_fn(_Standardized(X[train], standardize), y[train], grid, tol,
                           MAX_ITER, dev_stop=DEV_RATIO_STOP)
            for i, f in enumerate(path):
                errs[k, i] = _heldout_error(family, X[test], y[test], f.beta_hat)
            length = min(length, len(path))
    grid, errs = grid[:length], errs[:, :length]
    w = sizes / sizes.sum()
    cv_mean = w @ errs
    cv_se = np.sqrt((w @ (errs - cv_mean) ** 2) / (folds - 1))
    lam_min, lam_1se = one_se_rule(grid, cv_mean, cv_se)
    return CvReport(grid, cv_mean, cv_se, lam_min, lam_1se, folds, family)


def _heldout_error(family, X, y, b):
    eta = X @ b
    if family == "gaussian":
        return float(np.mean((y - eta) ** 2))
    # deviance = 2 * negative log-likelihood
    return float(2.0 * np.mean(np.logaddexp(0.0, eta) - y * eta))


def cv_fit(X, y, family: Family = "gaussian", folds: int = 10, grid_size: int = 100,
           seed: int = 0, standardize: bool = True, rule: str = "1se",
           rng: Optional[np.random.Generator] = None):
    """Cross-validate, then refit on all rows along the grid down to the chosen penalty.

    Returns ``(LassoFit, CvReport)``.
    """
    report = cv_select(X, y, family, folds, grid_size, seed, standardize, rng=rng)
    target = report.lambda_1se if rule == "1se" else report.lambda_min
    stop = int(np.flatnonzero(report.lambda_grid == target)[0]) + 1
    path_fn = logistic_lasso_path if family == "binomial" else lasso_path
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        fits = path_fn(X, y, report.lambda_grid[:stop], standardize=standardize)
    return fits[-1], report
