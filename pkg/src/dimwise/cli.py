"""Command-line harness: ``verify``, ``solve``, ``cnf`` and ``fp``.

Every run resolves its parameters from built-in defaults, an optional flat
``key = value`` file (``--config``) and ``--key value`` flags, in that order
of precedence, and writes into ``--out``:

* ``config.txt``: the fully resolved configuration; rerunning with
  ``--config config.txt`` reproduces the CSV outputs,
* the subcommand's CSV files,
* ``manifest.json``: config hash, seed, wall time, version and the sha256
  of every output file.

The exit code is 0 iff every internal check passed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__

# files a previous run may have left in --out; nothing else there is touched
OUTPUT_PATTERNS = ("config.txt", "manifest.json", "report.csv", "trajectory*.csv", "stats.csv",
                   "checks.csv", "curve*.csv", "eval_curve*.csv", "density_grid*.csv",
                   "checkpoint*.npz", "results.csv", "summary.csv")

DEFAULTS = {
    "verify": {
        "seed": 0,
        "dims": (1, 2, 5, 10),
        "orders": (1, 2, 3),
        "n_points": 4,
        "n_grad_entries": 40,
    },
    "solve": {
        "seed": 0,
        "problem": "decay",
        "solver": "abm",
        "corrector": "jacobi_newton",
        "compare": False,
        "rtol": 1e-6,
        "atol": 1e-6,
        "tau_a": 0.0,
        "tau_r": 0.0,
        "h_init": 0.0,
        "fixed_step": False,
        "max_corrector_iters": 4,
        "d": 10,
    },
    "cnf": {
        "seed": 0,
        "dataset": "ring8",
        "trace": "exact",
        "iters": 500,
        "batch_size": 64,
        "lr": 5e-3,
        "n_steps": 20,
        "eval_every": 50,
        "eval_size": 512,
        "n_train": 20000,
        "d_h": 8,
        "cond_hidden": (32,),
        "trans_hidden": (32, 32),
        "grid_lo": -4.0,
        "grid_hi": 4.0,
        "grid_n": 60,
    },
    "fp": {
        "seed": 0,
        "n_seeds": 3,
        "retentions": (1.0, 0.2, 0.04),
        "method": "both",
        "iters": 5000,
        "batch_size": 128,
        "lr": 3e-3,
        "lambda_0": 1.0,
        "n_traj": 1000,
        "n_eval_traj": 1000,
        "hidden": (32, 32, 32),
        "m": 5,
        "kind": "mlp",
    },
}

CHOICES = {
    "problem": ("decay", "stiff_decay", "linear_system", "hollow_random"),
    "solver": ("rk45", "abm"),
    "corrector": ("functional", "jacobi_newton", "full_newton"),
    "dataset": ("ring8", "moons", "gauss"),
    "trace": ("exact", "hutchinson", "paired"),
    "method": ("fp_match", "pseudo_ml", "both"),
    "kind": ("mlp", "hollow"),
}


class ConfigFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration


def _parse_value(text, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        item = type(default[0]) if default else float
        return tuple(item(v) for v in text.replace(" ", "").split(",") if v)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config(path, command):
    """Parse a flat ``key = value`` file against the defaults of ``command``."""
    defaults = DEFAULTS[command]
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "command":
            if value != command:
                raise ConfigFileError(f"{path}: written for '{value}', not '{command}'")
            continue
        if key not in defaults:
            raise ConfigFileError(f"{path}:{n}: unknown key '{key}' for '{command}'")
        try:
            out[key] = _parse_value(value, defaults[key])
        except ValueError as exc:
            raise ConfigFileError(f"{path}:{n}: {exc}") from None
    return out


def format_config(command, cfg):
    lines = [f"command = {command}"]
    lines += [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def resolve(command, args):
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        cfg.update(read_config(args.config, command))
    for key in DEFAULTS[command]:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = _parse_value(v, DEFAULTS[command][key]) if isinstance(v, str) else v
    for key, allowed in CHOICES.items():
        if key in cfg and cfg[key] not in allowed:
            raise ConfigFileError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    return cfg


# ---------------------------------------------------------------------------
# Output helpers


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _version():
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).resolve().parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out, config_text, seed, wall_time):
    files = sorted(p for p in Path(out).iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "wall_time": wall_time,
        "version": _version(),
        "outputs": {p.name: _sha256(p) for p in files},
    }
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_verify(cfg, out, jobs=1, corrupt=False):
    from .verify import REPORT_HEADER, run_suite

    rows = run_suite(dims=cfg["dims"], orders=cfg["orders"], seed=cfg["seed"],
                     n_points=cfg["n_points"], n_grad_entries=cfg["n_grad_entries"],
                     corrupt=corrupt)
    write_rows(out / "report.csv", REPORT_HEADER, [r.as_dict() for r in rows])
    failed = [r for r in rows if not r.passed]
    for r in failed:
        _log(f"FAIL {r.suite} d={r.d} k={r.k} error={r.max_error:.3e} tol={r.tolerance:.1e}")
    _log(f"verify: {len(rows) - len(failed)}/{len(rows)} checks passed")
    return 0 if not failed else 1


def _solver_config(cfg, corrector):
    from .odesolve import SolverConfig

    kw = dict(rtol=cfg["rtol"], atol=cfg["atol"], corrector=corrector,
              max_corrector_iters=cfg["max_corrector_iters"], fixed_step=cfg["fixed_step"])
    for key in ("tau_a", "tau_r", "h_init"):
        if cfg[key] > 0:
            kw[key] = cfg[key]
    return SolverConfig(**kw)


def cmd_solve(cfg, out, jobs=1, corrupt=False):
    from . import adgraph as ag
    from .odesolve import (STATS_HEADER, SolverError, abm_solve, analytic_solution,
                           make_problem, rk45_adaptive)

    problem = make_problem(cfg["problem"], d=cfg["d"], seed=cfg["seed"])
    if cfg["compare"]:
        runs = [("rk45", None), ("abm-functional", "functional"),
                ("abm-jacobi", "jacobi_newton")]
    elif cfg["solver"] == "rk45":
        runs = [("rk45", None)]
    else:
        runs = [(f"abm-{cfg['corrector']}", cfg["corrector"])]
    stats_rows, checks, code = [], [], 0
    for label, corrector in runs:
        sweeps0 = ag.total_sweeps()
        try:
            conf = _solver_config(cfg, corrector or "jacobi_newton")
            traj = rk45_adaptive(problem, conf) if corrector is None else abm_solve(problem, conf)
        except (SolverError, ArithmeticError) as exc:
            _log(f"{label}: solver failure: {exc}")
            stats = getattr(exc, "stats", None)
            if stats is not None:
                stats_rows.append(stats.row(label))
            code = 1
            continue
        sweeps = ag.total_sweeps() - sweeps0
        name = "trajectory.csv" if len(runs) == 1 else f"trajectory_{label}.csv"
        traj.write_csv(out / name)
        stats_rows.append(traj.stats.row(label))
        exact = analytic_solution(cfg["problem"], traj.t)
        if exact is not None:
            err = float(np.max(np.abs(traj.y - exact)))
            limit = 100.0 * (conf.atol + conf.rtol) if not conf.fixed_step else math.inf
            checks.append({"solver": label, "check": "max_abs_error_vs_analytic",
                           "value": repr(err), "limit": repr(limit), "passed": int(err <= limit)})
        if problem.f_and_dim_derivative is not None and corrector == "jacobi_newton":
            calls = traj.stats.n_dim_derivative_calls
            ok = calls > 0 and sweeps == calls
            checks.append({"solver": label, "check": "sweeps_per_dim_derivative_call",
                           "value": repr(sweeps / max(calls, 1)), "limit": "1.0",
                           "passed": int(ok)})
    write_rows(out / "stats.csv", STATS_HEADER, stats_rows)
    write_rows(out / "checks.csv", ["solver", "check", "value", "limit", "passed"], checks)
    for row in stats_rows:
        _log(", ".join(f"{k}={v}" for k, v in row.items()))
    if any(not c["passed"] for c in checks):
        code = 1
    return code


def _cnf_run(cfg, mode, out, tag):
    from .cnf import (CnfModel, TraceEstimator, TrainConfig, TrainingDivergence, density_grid,
                      grid_mass, make_dataset, train_mle, write_curve, write_density_grid,
                      write_eval_curve)
    from .hollownet import save_checkpoint

    seed = cfg["seed"]
    data = make_dataset(cfg["dataset"], cfg["n_train"], seed=seed)
    eval_data = make_dataset(cfg["dataset"], cfg["eval_size"], seed=1000 + seed)
    model = CnfModel.create(2, d_h=cfg["d_h"], cond_hidden=cfg["cond_hidden"],
                            trans_hidden=cfg["trans_hidden"], seed=seed)
    tc = TrainConfig(iters=cfg["iters"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     n_steps=cfg["n_steps"], eval_every=cfg["eval_every"],
                     eval_size=cfg["eval_size"], data_seed=seed)
    try:
        res = train_mle(model, data, TraceEstimator(mode, seed=seed + 7), tc,
                        eval_data=eval_data)
    except TrainingDivergence as exc:
        return {"tag": tag, "error": str(exc)}
    suffix = "" if tag is None else f"_{tag}"
    write_curve(out / f"curve{suffix}.csv", res)
    write_eval_curve(out / f"eval_curve{suffix}.csv", res)
    lo, hi, n = cfg["grid_lo"], cfg["grid_hi"], cfg["grid_n"]
    pts, logp, _ = density_grid(model, lo, hi, n)
    write_density_grid(out / f"density_grid{suffix}.csv", pts, logp)
    save_checkpoint(model.dynamics, out / f"checkpoint{suffix}.npz",
                    extra={"t_span": list(model.t_span), "trace": mode})
    return {"tag": tag, "mass": grid_mass(pts, logp, lo, hi, n),
            "final_eval": res.eval_curve[-1][1], "eval_curve": res.eval_curve}


def cmd_cnf(cfg, out, jobs=1, corrupt=False):
    if cfg["trace"] == "paired":
        modes = [("exact", "exact"), ("hutchinson", "hutchinson")]
    else:
        modes = [(cfg["trace"], None)]
    if jobs > 1 and len(modes) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cnf_run, [cfg] * len(modes), [m for m, _ in modes],
                                    [out] * len(modes), [t for _, t in modes]))
    else:
        results = [_cnf_run(cfg, m, out, t) for m, t in modes]
    checks, code = [], 0
    for r in results:
        label = r["tag"] or cfg["trace"]
        if "error" in r:
            _log(f"{label}: {r['error']}")
            code = 1
            continue
        ok = abs(r["mass"] - 1.0) <= 0.02
        checks.append({"run": label, "check": "grid_mass", "value": repr(r["mass"]),
                       "limit": "0.02", "passed": int(ok)})
        code |= int(not ok)
        _log(f"{label}: final eval NLL {r['final_eval']:.4f}, grid mass {r['mass']:.4f}")
    if len(results) == 2 and all("error" not in r for r in results):
        thr = results[1]["final_eval"]
        reach = next((it for it, v in results[0]["eval_curve"] if v <= thr), None)
        checks.append({"run": "paired", "check": "exact_iters_to_stochastic_final",
                       "value": "none" if reach is None else str(reach),
                       "limit": str(cfg["iters"]), "passed": int(reach is not None)})
    write_rows(out / "checks.csv", ["run", "check", "value", "limit", "passed"], checks)
    return code


def _fp_seed(cfg, methods, seed):
    from .fpmatch import FpTrainConfig, fp_experiment

    tc = FpTrainConfig(iters=cfg["iters"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       lambda_0=cfg["lambda_0"], seed=seed)
    return fp_experiment(retentions=cfg["retentions"], methods=methods, seed=seed,
                         n_traj=cfg["n_traj"], n_eval_traj=cfg["n_eval_traj"], config=tc,
                         hidden=cfg["hidden"], m=cfg["m"], kind=cfg["kind"], log=_log)


def cmd_fp(cfg, out, jobs=1, corrupt=False):
    from .fpmatch import RESULTS_HEADER, write_results_csv

    if any(not 0 < r <= 1 for r in cfg["retentions"]):
        raise ConfigFileError("retentions must lie in (0, 1]")
    methods = ("fp_match", "pseudo_ml") if cfg["method"] == "both" else (cfg["method"],)
    seeds = [cfg["seed"] + i for i in range(cfg["n_seeds"])]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_fp_seed, [cfg] * len(seeds), [methods] * len(seeds),
                                     seeds))
    else:
        per_seed = [_fp_seed(cfg, methods, s) for s in seeds]
    rows = [r for rs in per_seed for r in rs]
    write_results_csv(out / "results.csv", rows)
    summary = []
    for method in methods:
        for ret in cfg["retentions"]:
            sel = [r for r in rows if r["method"] == method and r["retention"] == ret]
            dm = np.array([r["drift_mae"] for r in sel])
            gm = np.array([r["diffusion_mae"] for r in sel])
            summary.append({"method": method, "retention": repr(float(ret)),
                            "drift_mae_mean": repr(float(dm.mean())),
                            "drift_mae_std": repr(float(dm.std())),
                            "diffusion_mae_mean": repr(float(gm.mean())),
                            "diffusion_mae_std": repr(float(gm.std())),
                            "n_seeds": len(sel)})
    write_rows(out / "summary.csv", ["method", "retention", "drift_mae_mean", "drift_mae_std",
                                     "diffusion_mae_mean", "diffusion_mae_std", "n_seeds"],
               summary)
    failed = [r for r in rows if not math.isfinite(r["drift_mae"])]
    for r in failed:
        _log(f"failed: {r['method']} retention={r['retention']} seed={r['seed']}")
    return 0 if not failed else 1


COMMANDS = {"verify": cmd_verify, "solve": cmd_solve, "cnf": cmd_cnf, "fp": cmd_fp}

HELP = {
    "verify": "operator oracle checks (hollowness, splice soundness, gradients, sweeps)",
    "solve": "solve a named ODE problem with rk45 or ABM",
    "cnf": "train a continuous normalizing flow on a 2-D toy density",
    "fp": "Fokker-Planck matching versus pseudo-ML on pendulum data",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dimwise", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--config", default=None, help="flat key = value configuration file")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        if name == "verify":
            p.add_argument("--corrupt-mask", action="store_true", help=argparse.SUPPRESS)
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, dest=key, default=None, action="store_const", const=True)
                p.add_argument("--no-" + key.replace("_", "-"), dest=key,
                               action="store_const", const=False)
            else:
                p.add_argument(flag, dest=key, default=None, type=str,
                               choices=CHOICES.get(key),
                               metavar=key.upper() if key not in CHOICES else None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
    except (ConfigFileError, ValueError) as exc:
        _log(f"configuration error: {exc}")
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for pattern in OUTPUT_PATTERNS:
        for stale in out.glob(pattern):
            stale.unlink()
    text = format_config(args.command, cfg)
    (out / "config.txt").write_text(text)
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg, out, jobs=max(1, args.jobs),
                                      corrupt=getattr(args, "corrupt_mask", False))
    except ConfigFileError as exc:
        _log(f"configuration error: {exc}")
        code = 2
    write_manifest(out, text, cfg["seed"], time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
