"""Bias-correction programs and their certificates.

Both forms act on the offset ``z = mu - f`` and the moment residual
``r(mu) = target - M'(mu - f) / n`` where ``M`` is ``X_main`` (one row per
observation, one column per balanced moment).

Constrained form::

    min (1/n) ||f - mu||^2   s.t.  ||r(mu)||_inf <= eta

Its dual is the Lasso ``min_u ||M u||^2 / (4n) + target'u + eta ||u||_1`` with
``z = -M u / 2``; the dual gradient equals ``r``, so dual KKT residual and
primal feasibility coincide.

Lagrangian form::

    min (1-kappa)/(kappa n^2) ||f - mu||^2 + ||r(mu)||_inf^2

Writing ``a = (1-kappa)/(kappa n^2)`` and introducing the epigraph variable
``t >= |r_j|``, the dual over multipliers ``alpha, beta >= 0`` of the
``2p`` linear constraints is the bound-constrained QP::

    min ||M u||^2 / (4 a n^2) + (sum(alpha) + sum(beta))^2 / 4 + target'u,
    u = beta - alpha,

solved by projected coordinate descent; ``z = -M u / (2 a n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linprog, nnls

from ._cd import nonneg_qp_cd, quad_l1_cd
from .data import DipwError

TOL_OBJ = 1e-6
STALL_SWEEPS = 1000


class BalanceInputError(DipwError, ValueError):
    pass


@dataclass(frozen=True)
class BalanceProblem:
    X_main: NDArray
    f_main: NDArray
    target: NDArray
    eta: Optional[float] = None
    kappa: Optional[float] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X_main, dtype=float))
        f = np.asarray(self.f_main, dtype=float).reshape(-1)
        v = np.asarray(self.target, dtype=float).reshape(-1)
        if X.shape[0] != f.shape[0]:
            raise BalanceInputError(
                f"X_main has {X.shape[0]} rows but f_main has length {f.shape[0]}")
        if X.shape[1] != v.shape[0]:
            raise BalanceInputError(
                f"X_main has {X.shape[1]} columns but target has length {v.shape[0]}")
        if self.eta is None and self.kappa is None:
            raise BalanceInputError("one of eta (constrained) or kappa (Lagrangian) is required")
        if self.eta is not None and not self.eta >= 0:
            raise BalanceInputError("eta must be non-negative")
        if self.kappa is not None and not 0 < self.kappa < 1:
            raise BalanceInputError("kappa must lie in (0, 1)")
        object.__setattr__(self, "X_main", X)
        object.__setattr__(self, "f_main", f)
        object.__setattr__(self, "target", v)

    @property
    def n(self) -> int:
        return self.X_main.shape[0]

    def residual(self, mu):
        return self.target - self.X_main.T @ (np.asarray(mu) - self.f_main) / self.n

    @property
    def tol_feas(self) -> float:
        return 1e-7 * (1.0 + np.max(np.abs(self.target), initial=0.0))

    def constrained_objective(self, mu):
        d = self.f_main - np.asarray(mu)
        return float(d @ d / self.n)

    def lagrangian_objective(self, mu):
        if self.kappa is None:
            raise BalanceInputError("kappa is not set")
        d = self.f_main - np.asarray(mu)
        a = (1.0 - self.kappa) / (self.kappa * self.n ** 2)
        r = self.residual(mu)
        return float(a * (d @ d) + np.max(np.abs(r), initial=0.0) ** 2)


@dataclass
class BalanceSolution:
    mu_hat: NDArray
    objective: float
    feasibility_residual: float
    certificate_gap: float
    fallback_zero: bool = False
    n_iter: int = 0
    form: str = "constrained"
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "form": self.form,
            "objective": self.objective,
            "feasibility_residual": self.feasibility_residual,
            "certificate_gap": self.certificate_gap,
            "fallback_zero": self.fallback_zero,
            "n_iter": self.n_iter,
            "mu_inf_norm": float(np.max(np.abs(self.mu_hat), initial=0.0)),
        }


def _is_feasible(prob: BalanceProblem) -> bool:
    """LP check: does some ``z`` satisfy ``|target - M'z/n| <= eta``?"""
    A = prob.X_main.T / prob.n
    v, eta = prob.target, prob.eta
    res = linprog(np.zeros(prob.n), A_ub=np.vstack([A, -A]),
                  b_ub=np.concatenate([v + eta, eta - v]),
                  bounds=[(None, None)] * prob.n, method="highs")
    return res.status == 0


def solve_constrained(prob: BalanceProblem, max_sweeps: int = 100_000) -> BalanceSolution:
    """Euclidean projection of ``f_main`` onto the moment-constraint polyhedron.

    Falls back to ``mu = 0`` when the polyhedron is empty: detected when the dual
    iterates stall above ``1e3 * tol_feas`` for ``1000`` consecutive sweeps (and an
    LP confirms emptiness) or diverge.
    """
    if prob.eta is None:
        raise BalanceInputError("solve_constrained needs eta")
    n, M = prob.n, prob.X_main
    G = np.ascontiguousarray(M.T @ M / (2.0 * n))
    q = -prob.target
    q = np.ascontiguousarray(q)
    lam = np.full(q.shape[0], float(prob.eta))
    u = np.zeros(q.shape[0])
    tol = prob.tol_feas
    scale = 1.0 + np.max(np.abs(prob.target), initial=0.0) + np.sqrt(np.max(np.diag(G), initial=0.0))
    bound = 1e12 * scale
    sweeps_total, stalled, best = 0, 0, np.inf
    status = 1
    while sweeps_total < max_sweeps:
        chunk = min(STALL_SWEEPS, max_sweeps - sweeps_total)
        sweeps, kkt, status = quad_l1_cd(G, q, lam, u, tol, chunk, bound)
        sweeps_total += sweeps
        if status == 0:
            break
        viol = _feas_violation(prob, prob.f_main - M @ u / 2.0)
        if status == 2:
            break
        if viol > tol * 1e3 and viol > 0.99 * best:
            stalled += sweeps
        else:
            stalled = 0
        best = min(best, viol)
        if stalled >= STALL_SWEEPS:
            break
    mu = prob.f_main - M @ u / 2.0
    viol = _feas_violation(prob, mu)
    if status != 0 and viol > tol * 1e3 and not _is_feasible(prob):
        mu0 = np.zeros(n)
        return BalanceSolution(
            mu0, prob.constrained_objective(mu0), _feas_violation(prob, mu0), 0.0,
            fallback_zero=True, n_iter=sweeps_total, form="constrained",
            diagnostics={"status": "infeasible"},
        )
    sol = BalanceSolution(mu, prob.constrained_objective(mu), viol, 0.0,
                          n_iter=sweeps_total, form="constrained",
                          diagnostics={"status": "converged" if status == 0 else "iteration_cap"})
    sol.certificate_gap = certify(prob, sol)
    return sol


def _feas_violation(prob, mu):
    r = prob.residual(mu)
    return float(max(0.0, np.max(np.abs(r), initial=0.0) - prob.eta))


def solve_lagrangian(prob: BalanceProblem, tol: float = 1e-11,
                     max_sweeps: int = 200_000) -> BalanceSolution:
    """Minimise the quadratic-plus-max-of-squares objective via its epigraph dual."""
    if prob.kappa is None:
        raise BalanceInputError("solve_lagrangian needs kappa")
    n, M, v = prob.n, prob.X_main, prob.target
    a = (1.0 - prob.kappa) / (prob.kappa * n ** 2)
    B = M / n
    p = v.shape[0]
    K = B.T @ B / (2.0 * a)
    H = np.empty((2 * p, 2 * p))
    H[:p, :p] = K
    H[p:, p:] = K
    H[:p, p:] = -K
    H[p:, :p] = -K
    H += 0.5
    q = np.concatenate([v, -v])
    y = np.zeros(2 * p)
    sweeps, pg, status = nonneg_qp_cd(np.ascontiguousarray(H), q, y,
                                      tol * (1.0 + np.max(np.abs(v), initial=0.0)), max_sweeps)
    u = y[p:] - y[:p]
    mu = prob.f_main - B @ u / (2.0 * a)
    sol = _lagrangian_solution(prob, mu, u, int(sweeps), a)
    sol.diagnostics["status"] = "converged" if status == 0 else "iteration_cap"
    return sol


def _lagrangian_solution(prob, mu, u, n_iter, a):
    r = prob.residual(mu)
    primal = prob.lagrangian_objective(mu)
    Bu = prob.X_main @ u / prob.n
    dual = -(Bu @ Bu) / (4.0 * a) - np.abs(u).sum() ** 2 / 4.0 - prob.target @ u
    sol = BalanceSolution(mu, primal, 0.0, 0.0, n_iter=n_iter, form="lagrangian",
                          diagnostics={"duality_gap": float(max(primal - dual, 0.0)),
                                       "moment_inf_norm": float(np.max(np.abs(r), initial=0.0))})
    sol.certificate_gap = certify(prob, sol)
    return sol


def certify(prob: BalanceProblem, sol: BalanceSolution, active_tol: float = 1e-6) -> float:
    """Optimality certificate for ``sol`` (zero at an exact solution).

    Constrained form: feasibility violation plus the RMS distance of ``mu - f`` from
    the cone generated by the active constraint normals (a projection is optimal
    iff that distance is zero).  Lagrangian form: norm of the minimum-norm
    subgradient.
    """
    mu = np.asarray(sol.mu_hat, dtype=float)
    n, M = prob.n, prob.X_main
    z = mu - prob.f_main
    r = prob.residual(mu)
    if sol.form == "constrained":
        if sol.fallback_zero:
            return 0.0
        viol = max(0.0, np.max(np.abs(r), initial=0.0) - prob.eta)
        thresh = prob.eta - active_tol * (1.0 + prob.eta)
        act = np.flatnonzero(np.abs(r) >= thresh)
        if act.size == 0:
            return float(viol + np.linalg.norm(z) / np.sqrt(n))
        # z = sum_j c_j s_j M_j / n with c_j >= 0 and s_j = sign(r_j); with eta ~ 0
        # a constraint active at r_j ~ 0 is an equality and either sign is allowed
        sgn = np.sign(r[act])
        free = np.abs(r[act]) < active_tol * (1.0 + prob.eta)
        sgn[free] = 1.0
        cols = M[:, act] * sgn / n
        if np.any(free):
            cols = np.hstack([cols, -M[:, act[free]] / n])
        _, dist = nnls(cols, z, maxiter=50 * (act.size + n))
        return float(viol + dist / np.sqrt(n))
    a = (1.0 - prob.kappa) / (prob.kappa * n ** 2)
    rmax = np.max(np.abs(r), initial=0.0)
    smooth = 2.0 * a * z
    if rmax == 0.0:
        # subdifferential of ||r||^2 at r = 0 is {0}
        return float(np.linalg.norm(smooth))
    act = np.flatnonzero(np.abs(r) >= rmax - active_tol * (1.0 + rmax))
    # subgradient: smooth - 2 rmax * sum_j s_j sign(r_j) M_j / n, s in the simplex
    cols = 2.0 * rmax * M[:, act] * np.sign(r[act]) / n
    rho = 1e3 * (1.0 + np.abs(cols).max() + np.abs(smooth).max())
    A = np.vstack([cols, rho * np.ones((1, act.size))])
    b = np.concatenate([smooth, [rho]])
    s, _ = nnls(A, b, maxiter=50 * (act.size + n))
    s = s / s.sum()
    return float(np.linalg.norm(smooth - cols @ s))
