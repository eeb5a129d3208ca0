"""Covariance-update coordinate descent for ``0.5 b'Gb - q'b + sum_j lam_j |b_j|``.

Every l1 solver in the package (gaussian Lasso, the proximal-Newton inner step of
the logistic Lasso and the duals of the balance programs) reduces to this kernel.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True, nogil=True)
def kkt_residual(G, q, lam, b):
    p = b.shape[0]
    grad = G @ b - q
    worst = 0.0
    for j in range(p):
        if b[j] != 0.0:
            v = abs(grad[j] + lam[j] * np.sign(b[j]))
        else:
            v = abs(grad[j]) - lam[j]
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


@njit(cache=True, nogil=True)
def quad_l1_cd(G, q, lam, b, tol, max_iter, bound):
    """Minimise in place starting from ``b``.

    Returns ``(n_sweeps, kkt, status)``; status 0 converged, 1 iteration cap,
    2 a coefficient exceeded ``bound`` in absolute value (divergence guard).
    """
    p = b.shape[0]
    grad = G @ b - q
    active = np.zeros(p, dtype=np.bool_)
    for j in range(p):
        active[j] = b[j] != 0.0
    sweeps = 0
    kkt = np.inf
    full = True
    while sweeps < max_iter:
        sweeps += 1
        max_change = 0.0
        for j in range(p):
            if not full and not active[j]:
                continue
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = b[j]
            new = _soft(gjj * old - grad[j], lam[j]) / gjj
            if new != old:
                d = new - old
                b[j] = new
                for i in range(p):
                    grad[i] += G[j, i] * d
                c = abs(d) * np.sqrt(gjj)
                if c > max_change:
                    max_change = c
                if new != 0.0:
                    active[j] = True
                if abs(new) > bound:
                    return sweeps, np.inf, 2
        if max_change < tol or full:
            # recompute the gradient from scratch to shed accumulated rounding
            grad = G @ b - q
            kkt = 0.0
            for j in range(p):
                if b[j] != 0.0:
                    v = abs(grad[j] + lam[j] * np.sign(b[j]))
                else:
                    v = abs(grad[j]) - lam[j]
                    if v < 0.0:
                        v = 0.0
                if v > kkt:
                    kkt = v
            if kkt <= tol:
                return sweeps, kkt, 0
            full = not full
    return sweeps, kkt_residual(G, q, lam, b), 1


def solve_quad_l1(G, q, lam, b0=None, tol=1e-7, max_iter=100_000, bound=np.inf):
    G = np.ascontiguousarray(G, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    lam = np.ascontiguousarray(np.broadcast_to(lam, q.shape), dtype=np.float64)
    b = np.zeros_like(q) if b0 is None else np.array(b0, dtype=np.float64)
    sweeps, kkt, status = quad_l1_cd(G, q, lam, b, float(tol), int(max_iter), float(bound))
    return b, int(sweeps), float(kkt), int(status)


@njit(cache=True, nogil=True)
def _log1pexp(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True, nogil=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _logistic_total(eta, t, lam, b):
    n = eta.shape[0]
    s = 0.0
    for i in range(n):
        s += _log1pexp(eta[i]) - t[i] * eta[i]
    s /= n
    for j in range(b.shape[0]):
        s += lam[j] * abs(b[j])
    return s


@njit(cache=True, nogil=True)
def logistic_newton(Z, t, lam, b, tol, max_iter, bound):
    """Proximal Newton for the l1-penalised logistic loss, updating ``b`` in place.

    Returns ``(n_newton, kkt, status)``; status 0 converged, 1 iteration cap,
    2 separation guard hit, 3 line search stalled at working precision.
    """
    n, p = Z.shape
    Zt = np.ascontiguousarray(Z.T)
    eta = Z @ b
    f_cur = _logistic_total(eta, t, lam, b)
    mu = np.empty(n)
    sw = np.empty(n)
    kkt = np.inf
    for it in range(max_iter):
        for i in range(n):
            mu[i] = _sigmoid(eta[i])
        g = Zt @ (mu - t) / n
        kkt = 0.0
        for j in range(p):
            if b[j] != 0.0:
                v = abs(g[j] + lam[j] * np.sign(b[j]))
            else:
                v = abs(g[j]) - lam[j]
                if v < 0.0:
                    v = 0.0
            if v > kkt:
                kkt = v
        if kkt <= tol:
            return it, kkt, 0
        for i in range(n):
            w = mu[i] * (1.0 - mu[i])
            if w < 1e-12:
                w = 1e-12
            sw[i] = np.sqrt(w / n)
        Zw = Z * sw.reshape(-1, 1)
        H = Zw.T @ Zw
        q = H @ b - g
        cand = b.copy()
        inner_tol = min(1e-2 * kkt, 1e-3)
        if inner_tol < 0.1 * tol:
            inner_tol = 0.1 * tol
        quad_l1_cd(H, q, lam, cand, inner_tol, 100_000, bound * 10.0)
        d = cand - b
        decrease = g @ d
        for j in range(p):
            decrease += lam[j] * (abs(cand[j]) - abs(b[j]))
        zd = Z @ d
        step = 1.0
        accepted = False
        trial = b.copy()
        eta_t = eta.copy()
        f_t = f_cur
        for _ in range(60):
            trial = b + step * d
            eta_t = eta + step * zd
            f_t = _logistic_total(eta_t, t, lam, trial)
            if f_t <= f_cur + 1e-4 * step * decrease:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return it + 1, kkt, 3
        b[:] = trial
        eta = eta_t
        f_cur = f_t
        for j in range(p):
            if abs(b[j]) > bound:
                return it + 1, kkt, 2
    return max_iter, kkt, 1


@njit(cache=True, nogil=True)
def nonneg_qp_cd(H, q, y, tol, max_iter):
    """Minimise ``0.5 y'Hy - q'y`` over ``y >= 0`` in place.

    Returns ``(n_sweeps, projected_gradient_norm_inf, status)``.
    """
    m = y.shape[0]
    grad = H @ y - q
    sweeps = 0
    pg = np.inf
    while sweeps < max_iter:
        sweeps += 1
        max_change = 0.0
        for j in range(m):
            hjj = H[j, j]
            if hjj <= 0.0:
                continue
            old = y[j]
            new = old - grad[j] / hjj
            if new < 0.0:
                new = 0.0
            if new != old:
                d = new - old
                y[j] = new
                for i in range(m):
                    grad[i] += H[j, i] * d
                c = abs(d) * np.sqrt(hjj)
                if c > max_change:
                    max_change = c
        if max_change < tol or sweeps % 50 == 0:
            grad = H @ y - q
            pg = 0.0
            for j in range(m):
                if y[j] > 0.0:
                    v = abs(grad[j])
                else:
                    v = -grad[j]
                if v > pg:
                    pg = v
            if pg <= tol:
                return sweeps, pg, 0
    return sweeps, pg, 1
