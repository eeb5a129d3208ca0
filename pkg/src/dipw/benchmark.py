"""Monte-Carlo replication harness.

Each replication draws a fresh design (coefficients, covariates, outcomes) from
its own named random streams, runs every requested method on the same
propensity fit, and records one row per method.  Rows are reduced in
replication order, so output does not depend on pool scheduling.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .estimators import (DipwConfig, EstimateReport, confidence_interval, estimate,
                         estimate_oracle_dipw, estimate_potential_variance,
                         fit_propensity)
from .rng import derived_seed
from .simgen import SimulationDesign, simulate, true_var_y1

ATE_METHODS = ("mdipw", "ipw", "aipw", "dipw-basic", "oracle")
VAR_METHODS = ("mdipw", "ipw", "aipw", "dipw-basic", "naive")
COLUMNS = ("rep", "method", "tau_hat", "abs_err", "sigma_m_sq", "ci_lo", "ci_hi",
           "covered", "runtime_ms")


@dataclass(frozen=True)
class BenchmarkConfig:
    design: SimulationDesign
    reps: int = 250
    methods: tuple = ("mdipw", "ipw", "aipw")
    target: str = "ate"
    estimator: DipwConfig = field(default_factory=DipwConfig)
    record_runtime: bool = False

    def __post_init__(self):
        allowed = ATE_METHODS if self.target == "ate" else VAR_METHODS
        if self.target not in ("ate", "var-y1"):
            raise ValueError(f"target must be 'ate' or 'var-y1', got {self.target!r}")
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ValueError(f"unknown method(s) {bad} for target {self.target}; choose from {allowed}")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")


def _oracle_report(data, truth, X, cfg):
    pi = truth.pi(X)
    mu = truth.mu_oracle(X)
    tau = estimate_oracle_dipw(data, pi, mu)
    s = data.T * (data.Y - mu) / pi - (1 - data.T) * (data.Y - mu) / (1 - pi)
    sig = float(np.mean((s - tau) ** 2))
    return EstimateReport("ORACLE", tau, [tau], sig,
                          confidence_interval(tau, sig, data.n, cfg.alpha), cfg.alpha, data.n)


def _naive_report(data, cfg):
    y1 = data.Y[data.T == 1.0]
    v = float(np.var(y1, ddof=1))
    # delta-method variance of the sample variance
    m4 = float(np.mean((y1 - y1.mean()) ** 4))
    sig = max(m4 - v * v, 0.0)
    return EstimateReport("naive", v, [v], sig,
                          confidence_interval(v, sig, len(y1), cfg.alpha), cfg.alpha, len(y1),
                          target="var_y1")


def run_replication(bcfg: BenchmarkConfig, rep: int) -> list:
    """All method rows for replication ``rep``."""
    design = bcfg.design
    sim = simulate(design, rep)
    data = sim.dataset()
    cfg = replace(bcfg.estimator, seed=derived_seed(design.seed, "estimator", rep))
    if bcfg.target == "ate":
        truth_value = sim.truth.tau
    else:
        truth_value = sim.truth.var_y1
        if truth_value is None:
            truth_value = true_var_y1(sim.truth, design, rep=rep)
    t0 = time.perf_counter()
    needs_fit = any(m not in ("oracle", "naive") for m in bcfg.methods)
    prop = fit_propensity(data, cfg) if needs_fit else None
    prop_ms = (time.perf_counter() - t0) * 1e3
    rows = []
    for method in bcfg.methods:
        t1 = time.perf_counter()
        if method == "oracle":
            rpt = _oracle_report(data, sim.truth, sim.X, cfg)
        elif method == "naive":
            rpt = _naive_report(data, cfg)
        elif bcfg.target == "var-y1":
            rpt = estimate_potential_variance(data, cfg, method, prop)
        else:
            rpt = estimate(data, method, cfg, prop)
        ms = (time.perf_counter() - t1) * 1e3 + (prop_ms if method not in ("oracle", "naive") else 0.0)
        lo, hi = rpt.ci
        rows.append({
            "rep": rep,
            "method": method,
            "tau_hat": rpt.tau_hat,
            "abs_err": abs(rpt.tau_hat - truth_value),
            "sigma_m_sq": rpt.sigma_m_sq,
            "ci_lo": lo,
            "ci_hi": hi,
            "covered": int(lo <= truth_value <= hi),
            "runtime_ms": round(ms, 3) if bcfg.record_runtime else "",
        })
    return rows


def _run_one(args):
    bcfg, rep = args
    return run_replication(bcfg, rep)


def pool_size() -> int:
    try:
        return max(1, int(os.environ.get("DIPW_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(bcfg: BenchmarkConfig, workers: int = None, progress=None) -> list:
    """Rows for every replication, in replication order."""
    workers = pool_size() if workers is None else workers
    jobs = [(bcfg, r) for r in range(bcfg.reps)]
    out = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for rows in pool.map(_run_one, jobs):
                out.extend(rows)
                if progress:
                    progress(rows[0]["rep"])
    else:
        for job in jobs:
            rows = _run_one(job)
            out.extend(rows)
            if progress:
                progress(rows[0]["rep"])
    return out


def summarize(rows, methods) -> dict:
    out = {}
    for m in methods:
        sel = [r for r in rows if r["method"] == m]
        err = np.array([r["abs_err"] for r in sel])
        cov = np.array([r["covered"] for r in sel], dtype=float)
        est = np.array([r["tau_hat"] for r in sel])
        out[m] = {
            "reps": len(sel),
            "median_abs_err": float(np.median(err)),
            "mean_abs_err": float(np.mean(err)),
            "coverage": float(np.mean(cov)),
            "mean_tau_hat": float(np.mean(est)),
            "sd_tau_hat": float(np.std(est, ddof=1)) if len(est) > 1 else 0.0,
        }
    return out


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def rows_to_csv(rows) -> str:
    lines = [",".join(COLUMNS)]
    for r in rows:
        lines.append(",".join(format_value(r[c]) for c in COLUMNS))
    return "\n".join(lines) + "\n"


def manifest(command: str, config: dict, seed) -> dict:
    """Reproducibility record embedded in every result file (no wall-clock fields)."""
    return {"command": command, "config": config, "seed": seed, "version": __version__}
