"""Simulation designs: covariates, sparse coefficients, outcomes and ground truth.

Covariates are drawn without an intercept column; estimation code prepends it.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, DataError, DipwError, logistic
from .rng import stream

SUPPORT_SIZE = 50

COVARIANCES = ("toeplitz", "expdecay", "usercsv")
FUNCTIONS = ("linear", "nonlinear")
NOISES = ("homoscedastic", "heteroscedastic")


class DesignError(DipwError, ValueError):
    pass


@dataclass(frozen=True)
class SimulationDesign:
    n: int = 100
    p: int = 400
    cov: str = "toeplitz"
    rho: float = 0.9
    response: str = "linear"
    effect: str = "linear"
    d_gamma: int = 5
    noise: str = "homoscedastic"
    sigma: float = 1.0
    seed: int = 0
    cov_path: Optional[str] = None

    def __post_init__(self):
        if self.cov not in COVARIANCES:
            raise DesignError(f"cov must be one of {COVARIANCES}, got {self.cov!r}")
        if self.response not in FUNCTIONS or self.effect not in FUNCTIONS:
            raise DesignError(f"response and effect must be one of {FUNCTIONS}")
        if self.noise not in NOISES:
            raise DesignError(f"noise must be one of {NOISES}, got {self.noise!r}")
        if self.n < 4:
            raise DesignError("n must be at least 4")
        if not 1 <= self.d_gamma <= SUPPORT_SIZE <= self.p:
            raise DesignError(
                f"need 1 <= d_gamma <= {SUPPORT_SIZE} <= p, got d_gamma={self.d_gamma}, p={self.p}")
        if self.cov == "usercsv" and not self.cov_path:
            raise DesignError("cov=usercsv requires cov_path")

    def to_config(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_config().items())

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SimulationDesign":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            key = key.replace("-", "_")
            if key not in types:
                raise DesignError(f"unknown design key {key!r}")
            kwargs[key] = _coerce(value, types[key])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "SimulationDesign":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DesignError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    typ = str(typ)
    if typ.startswith("int"):
        return int(value)
    if typ.startswith("float"):
        return float(value)
    return value


@functools.lru_cache(maxsize=16)
def covariance(p: int, kind: str, rho: float = 0.9) -> NDArray:
    """Covariance matrix with unit diagonal for the built-in designs."""
    idx = np.arange(p)
    toe = rho ** np.abs(idx[:, None] - idx[None, :])
    if kind == "toeplitz":
        S = toe
    elif kind == "expdecay":
        L = np.linalg.cholesky(toe)
        Linv = np.linalg.solve(L, np.eye(p))
        S = Linv.T @ Linv
        S = 0.5 * (S + S.T)
        d = 1.0 / np.sqrt(np.diag(S))
        S = S * d[:, None] * d[None, :]
        np.fill_diagonal(S, 1.0)
    else:
        raise DesignError(f"no built-in covariance for {kind!r}")
    S.setflags(write=False)
    return S


@functools.lru_cache(maxsize=16)
def _cholesky(p: int, kind: str, rho: float) -> NDArray:
    try:
        L = np.linalg.cholesky(covariance(p, kind, rho))
    except np.linalg.LinAlgError as exc:
        raise DesignError(f"{kind} covariance is not positive definite") from exc
    L.setflags(write=False)
    return L


def mvn_rows(n: int, cov_chol: NDArray, rng: np.random.Generator) -> NDArray:
    return rng.standard_normal((n, cov_chol.shape[0])) @ cov_chol.T


def cholesky_or_raise(S) -> NDArray:
    S = np.asarray(S, dtype=float)
    try:
        return np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        raise DesignError("covariance matrix is not positive definite") from None


@functools.lru_cache(maxsize=4)
def _user_matrix(path: str, p: int) -> NDArray:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    try:
        vals = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric covariate entry ({exc})") from None
    if vals.shape[1] < p:
        raise DesignError(f"{path}: has {vals.shape[1]} columns, design needs p={p}")
    # keep the p highest-variance columns, in file order
    keep = np.sort(np.argsort(-vals.var(axis=0), kind="stable")[:p])
    out = vals[:, keep]
    out.setflags(write=False)
    return out


def gen_covariates(design: SimulationDesign, rng: Optional[np.random.Generator] = None,
                   rep: int = 0) -> NDArray:
    """``n x p`` covariate matrix (no intercept column)."""
    if design.cov == "usercsv":
        M = _user_matrix(design.cov_path, design.p)
        if M.shape[0] < design.n:
            raise DesignError(f"{design.cov_path}: only {M.shape[0]} rows, design needs n={design.n}")
        return np.array(M[: design.n])
    if rng is None:
        rng = stream(design.seed, "covariates", rep)
    return mvn_rows(design.n, _cholesky(design.p, design.cov, design.rho), rng)


@dataclass
class GroundTruth:
    beta: NDArray
    delta: NDArray
    gamma: NDArray
    response: str = "linear"
    effect: str = "linear"
    tau: float = 0.0
    tau_bar: Optional[float] = None
    var_y1: Optional[float] = None

    def b(self, X):
        X = np.asarray(X)
        if self.response == "linear":
            return X @ self.beta
        return 3.0 * (2.0 * logistic(X) - 1.0) @ self.beta

    def Delta(self, X):
        X = np.asarray(X)
        if self.effect == "linear":
            return X @ self.delta
        return logistic(-(X @ self.delta)) - 0.5

    def r0(self, X):
        return self.b(X)

    def r1(self, X):
        return self.b(X) + self.Delta(X)

    def pi(self, X):
        return logistic(np.asarray(X) @ self.gamma)

    def mu_oracle(self, X):
        """``r1 (1 - pi) + r0 pi``: conditional mean of the pseudo-outcome under the true propensity."""
        pi = self.pi(X)
        return self.r1(X) * (1.0 - pi) + self.r0(X) * pi


def _sparse_unit(p, support, rng, norm):
    v = np.zeros(p)
    v[support] = rng.uniform(0.0, 1.0, size=len(support))
    return v * (norm / np.linalg.norm(v))


def gen_coefficients(design: SimulationDesign, rng: Optional[np.random.Generator] = None,
                     rep: int = 0) -> GroundTruth:
    if rng is None:
        rng = stream(design.seed, "coefficients", rep)
    p = design.p
    supp_beta = np.sort(rng.choice(p, SUPPORT_SIZE, replace=False))
    beta = _sparse_unit(p, supp_beta, rng, 2.0)
    supp_delta = np.sort(rng.choice(p, SUPPORT_SIZE, replace=False))
    delta = _sparse_unit(p, supp_delta, rng, 1.0)
    supp_gamma = np.sort(rng.choice(supp_beta, design.d_gamma, replace=False))
    gamma = _sparse_unit(p, supp_gamma, rng, 1.0)
    truth = GroundTruth(beta, delta, gamma, design.response, design.effect)
    truth.tau = true_tau(truth, design, rep=rep)[0]
    if _var_closed_form(truth, design):
        truth.var_y1 = true_var_y1(truth, design)
    return truth


def _var_closed_form(truth, design):
    return design.cov != "usercsv" and truth.response == "linear" and truth.effect == "linear"


def noise_sd(design: SimulationDesign, pi):
    if design.noise == "homoscedastic":
        return np.full(np.shape(pi), design.sigma)
    return np.where(pi >= 0.5, np.sqrt(0.5), np.sqrt(2.0))


def gen_outcomes(X, truth: GroundTruth, design: SimulationDesign, rep: int = 0,
                 force_T: Optional[int] = None, rng_t=None, rng_y=None):
    """Draw ``(Y, T)``: ``T ~ Bernoulli(pi(X))``, ``Y = b(X) + T Delta(X) + eps``."""
    X = np.asarray(X)
    n = X.shape[0]
    pi = truth.pi(X)
    if rng_t is None:
        rng_t = stream(design.seed, "treatment", rep)
    if rng_y is None:
        rng_y = stream(design.seed, "noise", rep)
    u = rng_t.uniform(size=n)
    T = (u < pi).astype(float) if force_T is None else np.full(n, float(force_T))
    eps = rng_y.standard_normal(n) * noise_sd(design, pi)
    Y = truth.b(X) + T * truth.Delta(X) + eps
    return Y, T


def true_tau(truth: GroundTruth, design: SimulationDesign, mc_draws: int = 100_000,
             rep: int = 0):
    """Population ATE and its Monte-Carlo standard error as ``(tau, se)``.

    A linear effect with mean-zero covariates gives 0 analytically.  A nonlinear
    effect is averaged over ``mc_draws`` fresh draws; under the Gaussian designs
    ``Delta`` depends on ``x`` only through ``x'delta ~ N(0, delta' Sigma delta)``,
    so the scalar index is sampled directly.  User covariates are averaged over
    every row of the file.
    """
    if design.cov == "usercsv":
        M = _user_matrix(design.cov_path, design.p)
        vals = truth.Delta(M)
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))
    if truth.effect == "linear" or not np.any(truth.delta) or mc_draws <= 0:
        return 0.0, 0.0
    S = covariance(design.p, design.cov, design.rho)
    scale = float(np.sqrt(truth.delta @ S @ truth.delta))
    u = stream(design.seed, "truth-mc", rep).standard_normal(mc_draws) * scale
    vals = logistic(-u) - 0.5
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(mc_draws))


def true_var_y1(truth: GroundTruth, design: SimulationDesign, mc_draws: int = 200_000,
                rep: int = 0) -> float:
    """``Var(Y(1))``; closed form for linear response and effect under Gaussian designs,
    Monte Carlo (or the user covariate rows) otherwise."""
    if _var_closed_form(truth, design):
        S = covariance(design.p, design.cov, design.rho)
        c = truth.beta + truth.delta
        # pi(X) >= 0.5 iff X'gamma >= 0, probability 1/2 under a centred Gaussian
        noise_var = design.sigma ** 2 if design.noise == "homoscedastic" else 0.5 * 0.5 + 0.5 * 2.0
        return float(c @ S @ c + noise_var)
    if design.cov == "usercsv":
        X = np.asarray(_user_matrix(design.cov_path, design.p))
    else:
        X = mvn_rows(mc_draws, _cholesky(design.p, design.cov, design.rho),
                     stream(design.seed, "truth-var", rep))
    r1 = truth.r1(X)
    nv = noise_sd(design, truth.pi(X)) ** 2
    return float(r1.var() + nv.mean())


@dataclass
class Replication:
    rep: int
    X: NDArray
    Y: NDArray
    T: NDArray
    truth: GroundTruth

    def dataset(self) -> Dataset:
        return Dataset(np.column_stack([np.ones(len(self.Y)), self.X]), self.Y, self.T)

    @property
    def tau_bar(self) -> float:
        return float(np.mean(self.truth.Delta(self.X)))


def simulate(design: SimulationDesign, rep: int = 0) -> Replication:
    """One replication: fresh coefficients, covariates and outcomes from per-role streams."""
    truth = gen_coefficients(design, rep=rep)
    X = gen_covariates(design, rep=rep)
    Y, T = gen_outcomes(X, truth, design, rep=rep)
    truth.tau_bar = float(np.mean(truth.Delta(X)))
    return Replication(rep, X, Y, T, truth)
