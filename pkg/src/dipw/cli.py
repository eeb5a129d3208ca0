"""Command-line entry point: ``dipw estimate``, ``dipw simulate``, ``dipw benchmark``.

Exit codes: 0 success, 2 invalid input (the message names the offending flag or
file), 3 solver failure (diagnostics written next to the requested output).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path

from . import __version__
from .benchmark import (ATE_METHODS, VAR_METHODS, BenchmarkConfig, manifest, rows_to_csv,
                        run_benchmark, summarize)
from .data import DipwError, Dataset, SchemaError, atomic_write_text, dump_json, load_csv, write_csv
from .estimators import (METHODS, DipwConfig, estimate, estimate_potential_variance,
                         run_hte)
from .simgen import DesignError, SimulationDesign, parse_key_values, simulate
from .sparse import ConvergenceError

EXIT_INPUT = 2
EXIT_SOLVER = 3

ESTIMATE_DEFAULTS = {
    "method": "mdipw", "target": "ate", "B": 3, "kappa": 0.5, "alpha": 0.05, "seed": 0,
    "cv_folds": 10, "clip": 0.01, "c_eta": 1.0, "split": "random", "hte_cols": None,
    "hte_lasso": False, "force_mu_zero": False, "standardize": True,
}
DESIGN_KEYS = ("n", "p", "cov", "rho", "response", "effect", "d_gamma", "noise", "sigma",
               "cov_path")
BENCH_DEFAULTS = {
    "n": 100, "p": 400, "cov": "toeplitz", "rho": 0.9, "response": "linear",
    "effect": "linear", "d_gamma": 5, "noise": "homoscedastic", "sigma": 1.0, "cov_path": None,
    "reps": 250, "methods": "mdipw,ipw,aipw", "target": "ate", "B": 3, "kappa": 0.5,
    "alpha": 0.05, "cv_folds": 10, "clip": 0.01, "record_runtime": False,
}


class InputError(DipwError):
    pass


def _add_estimator_flags(p):
    p.add_argument("--B", type=int, help="number of split pairs (default 3)")
    p.add_argument("--kappa", type=float, help="Lagrangian trade-off in (0,1) (default 0.5)")
    p.add_argument("--alpha", type=float, help="CI level is 1-alpha (default 0.05)")
    p.add_argument("--cv-folds", dest="cv_folds", type=int, help="cross-validation folds (default 10)")
    p.add_argument("--clip", type=float, help="propensity clipping bound (default 0.01)")
    p.add_argument("--config", type=Path, help="key=value file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dipw", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"dipw {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate a treatment effect from a CSV file")
    est.add_argument("--data", type=Path, required=True)
    est.add_argument("--y", required=True, help="outcome column")
    est.add_argument("--t", required=True, help="binary treatment column")
    est.add_argument("--method", choices=sorted(METHODS))
    est.add_argument("--target", choices=("ate", "var-y1", "hte"))
    est.add_argument("--hte-cols", dest="hte_cols",
                     help="comma-separated covariate names for the projection (target hte)")
    est.add_argument("--hte-lasso", dest="hte_lasso", action="store_true", default=None,
                     help="project on all covariates with a cross-validated Lasso")
    est.add_argument("--seed", type=int)
    est.add_argument("--c-eta", dest="c_eta", type=float, help="eta constant (dipw-basic, hte)")
    est.add_argument("--split", choices=("random", "balanced"))
    est.add_argument("--no-standardize", dest="standardize", action="store_false", default=None)
    est.add_argument("--force-mu-zero", dest="force_mu_zero", action="store_true", default=None,
                     help=argparse.SUPPRESS)
    est.add_argument("--out", type=Path, help="output JSON path (default stdout)")
    _add_estimator_flags(est)

    sim = sub.add_parser("simulate", help="write one simulated dataset as CSV")
    _add_design_flags(sim)
    sim.add_argument("--rep", type=int, default=0)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", type=Path, required=True)
    sim.add_argument("--config", type=Path)

    bench = sub.add_parser("benchmark", help="run seeded Monte-Carlo replications")
    _add_design_flags(bench)
    bench.add_argument("--design", type=Path, help="key=value design/benchmark file")
    bench.add_argument("--reps", type=int)
    bench.add_argument("--methods", help=f"comma-separated subset of {ATE_METHODS} "
                                         f"(target var-y1: {VAR_METHODS})")
    bench.add_argument("--target", choices=("ate", "var-y1"))
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out-dir", dest="out_dir", type=Path, required=True)
    bench.add_argument("--record-runtime", dest="record_runtime", action="store_true", default=None,
                       help="fill runtime_ms (makes output non-reproducible)")
    bench.add_argument("--workers", type=int, help="process pool size (default DIPW_THREADS or 1)")
    _add_estimator_flags(bench)
    return ap


def _add_design_flags(p):
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--cov", choices=("toeplitz", "expdecay", "usercsv"))
    p.add_argument("--cov-path", dest="cov_path")
    p.add_argument("--rho", type=float)
    p.add_argument("--response", choices=("linear", "nonlinear"))
    p.add_argument("--effect", choices=("linear", "nonlinear"))
    p.add_argument("--d-gamma", dest="d_gamma", type=int)
    p.add_argument("--noise", choices=("homoscedastic", "heteroscedastic"))
    p.add_argument("--sigma", type=float)


def _coerce_like(value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(defaults: dict, config_path, args) -> dict:
    """Merge defaults < config file < explicit flags."""
    out = dict(defaults)
    if config_path is not None:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"--config/--design: cannot read {config_path}: {exc.strerror}") from None
        for k, v in parse_key_values(text).items():
            key = k.replace("-", "_")
            if key not in defaults and key != "seed":
                raise InputError(f"{config_path}: unknown key {k!r}")
            try:
                out[key] = int(v) if key == "seed" else _coerce_like(v, defaults.get(key))
            except ValueError:
                raise InputError(f"{config_path}: bad value for {k!r}: {v!r}") from None
    for k in list(defaults) + ["seed"]:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _estimator_config(r: dict) -> DipwConfig:
    try:
        return DipwConfig(B=r["B"], kappa=r["kappa"], alpha=r["alpha"], seed=r.get("seed") or 0,
                          cv_folds=r["cv_folds"], clip=r["clip"], c_eta=r.get("c_eta", 1.0),
                          split=r.get("split", "random"), standardize=r.get("standardize", True),
                          force_mu_zero=bool(r.get("force_mu_zero", False)))
    except ValueError as exc:
        raise InputError(f"--{str(exc).split()[0].replace('_', '-')}: {exc}") from None


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _stamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_estimate(args) -> int:
    r = resolve(ESTIMATE_DEFAULTS, args.config, args)
    cfg = _estimator_config(r)
    try:
        data = load_csv(args.data, args.y, args.t)
    except SchemaError as exc:
        raise InputError(f"--data/--y/--t: {exc}") from None
    if r["target"] == "ate":
        rep = estimate(data, r["method"], cfg).to_json()
    elif r["target"] == "var-y1":
        rep = estimate_potential_variance(data, cfg, r["method"]).to_json()
    else:
        rep = _estimate_hte(data, r, cfg)
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in r.items()}
    config.update({"data": str(args.data), "y": args.y, "t": args.t})
    rep["manifest"] = manifest("estimate", config, cfg.seed)
    _emit(dump_json(rep), args.out)
    return 0


def _estimate_hte(data: Dataset, r: dict, cfg: DipwConfig) -> dict:
    names = data.feature_names
    if r["hte_lasso"]:
        return run_hte(data, data.X, cfg, columns=names, lasso=True).to_json()
    cols = ["(intercept)"] + ([c.strip() for c in r["hte_cols"].split(",") if c.strip()]
                              if r["hte_cols"] else [])
    missing = [c for c in cols if c not in names]
    if missing:
        raise InputError(f"--hte-cols: unknown column(s) {missing}")
    idx = [names.index(c) for c in cols]
    return run_hte(data, data.X[:, idx], cfg, columns=cols).to_json()


def _design(r: dict, seed: int) -> SimulationDesign:
    kw = {k: r[k] for k in DESIGN_KEYS if r.get(k) is not None}
    try:
        return SimulationDesign(seed=seed, **kw)
    except DesignError as exc:
        raise InputError(f"design: {exc}") from None


def cmd_simulate(args) -> int:
    defaults = {k: BENCH_DEFAULTS[k] for k in DESIGN_KEYS}
    r = resolve(defaults, args.config, args)
    design = _design(r, args.seed)
    sim = simulate(design, args.rep)
    names = ["(intercept)"] + [f"x{j + 1}" for j in range(design.p)]
    data = Dataset(sim.dataset().X, sim.Y, sim.T, names)
    write_csv(data, args.out)
    truth = {
        "manifest": manifest("simulate", {**design.to_config(), "rep": args.rep}, args.seed),
        "tau": sim.truth.tau, "tau_bar": sim.tau_bar, "var_y1": sim.truth.var_y1,
        "beta": sim.truth.beta.tolist(), "delta": sim.truth.delta.tolist(),
        "gamma": sim.truth.gamma.tolist(),
    }
    atomic_write_text(Path(str(args.out) + ".truth.json"), dump_json(truth))
    return 0


def cmd_benchmark(args) -> int:
    r = resolve(BENCH_DEFAULTS, args.design if args.design else args.config, args)
    if args.design and args.config:
        r = resolve(r, args.config, args)
    if r.get("seed") is None:
        raise InputError("--seed: benchmark runs require an explicit seed")
    design = _design(r, int(r["seed"]))
    methods = tuple(m.strip() for m in str(r["methods"]).split(",") if m.strip())
    try:
        bcfg = BenchmarkConfig(design, r["reps"], methods, r["target"],
                               _estimator_config({**r, "seed": 0}),
                               bool(r["record_runtime"]))
    except ValueError as exc:
        raise InputError(f"--methods/--reps/--target: {exc}") from None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _stamp()
    rows = run_benchmark(bcfg, workers=args.workers)
    config = {k: v for k, v in r.items() if k != "seed"}
    man = manifest("benchmark", config, int(r["seed"]))
    atomic_write_text(out_dir / "replications.csv",
                      f"# manifest: {json.dumps(man, sort_keys=True)}\n" + rows_to_csv(rows))
    summary = {"manifest": man, "target": bcfg.target, "methods": summarize(rows, methods)}
    atomic_write_text(out_dir / "summary.json", dump_json(summary))
    atomic_write_text(out_dir / "run.json",
                      dump_json({**man, "started": started, "finished": _stamp()}))
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def _failure_path(args) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "failure.json"
    out = getattr(args, "out", None)
    return Path(str(out) + ".failure.json") if out else Path("dipw-failure.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConvergenceError as exc:
        path = _failure_path(args)
        try:
            atomic_write_text(path, dump_json({"error": str(exc),
                                               "kkt_residual": exc.kkt_residual}))
        except OSError:
            pass
        print(f"dipw: solver failure: {exc} (diagnostics: {path})", file=sys.stderr)
        return EXIT_SOLVER
    except (DipwError, ValueError, OSError) as exc:
        print(f"dipw: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
