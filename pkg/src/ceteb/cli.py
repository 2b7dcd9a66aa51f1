"""Command-line interface.

Exit codes: 0 ok, 1 configuration or I/O error, 2 infeasible request,
3 solver failure, 4 safety violation (an escape in simulation).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys as _sys
import time
from pathlib import Path

import numpy as np

from . import adaptation
from .barrier import DEFAULT_STEP, build_barrier, build_teb
from .errors import (
    BarrierOpen,
    CetebError,
    DomainError,
    GeometryError,
    Infeasible,
    NoBnupError,
    NoRoot,
    SafetyViolation,
    ValidityFailed,
)
from .geometry import CaptivitySet, compute_bnup
from .io import write_json, write_teb_svg
from .sim import OptimalEscape, SimConfig, monte_carlo_invariance, simulate
from .systems import ChauffeurSystem, system_from_dict

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_SAFETY = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(_sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _system(args):
    """Model from ``--model``, from a loaded config, or the default chauffeur."""
    path = args.model
    if path is None:
        doc = getattr(args, "model_doc", None)
        return ChauffeurSystem() if doc is None else system_from_dict(doc)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model file {path} is not valid JSON: {exc}") from exc
    return system_from_dict(doc)


def _require(args, name, flag):
    v = getattr(args, name)
    if v is None:
        raise ConfigError(f"missing required field '{name}' (pass {flag})")
    if not math.isfinite(v):
        raise ConfigError(f"field '{name}' must be finite")
    return v


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _resolved(args, sys) -> dict:
    keys = ["alpha", "v_lf", "beta_range", "seed", "tol", "dt", "horizon", "runs", "step", "report", "x0"]
    return {
        "command": args.command,
        "model": sys.to_dict(),
        "params": {k: getattr(args, k) for k in keys if hasattr(args, k)},
    }


def _write_geometry(out: Path, sys, beta, barrier):
    cap = CaptivitySet.for_system(sys, beta)
    teb = build_teb(sys, cap, barrier)
    teb.to_csv(out / "teb.csv")
    write_teb_svg(out / "teb.svg", teb)
    return teb


def _write_solution(out: Path, args, sys, rep, t0):
    teb = _write_geometry(out, rep.system, rep.beta, rep.barrier)
    doc = rep.to_dict()
    doc["model"] = rep.system.to_dict()
    doc["wte"] = teb.wte
    write_json(out / "report.json", doc)
    write_json(out / "resolved_config.json", _resolved(args, sys))
    write_json(out / "timing.json", {"wall_time": time.perf_counter() - t0})
    print(json.dumps({"status": rep.status, "solved_value": rep.solved_value,
                      "theta": rep.theta, "beta": rep.beta, "residual": rep.residual}))


def cmd_solve_theta(args) -> int:
    t0 = time.perf_counter()
    sys = _system(args)
    alpha = _require(args, "alpha", "--alpha")
    out = _out_dir(args)
    rep = adaptation.solve_theta_for_alpha(sys, alpha, tol=args.tol, step=args.step)
    _write_solution(out, args, sys, rep, t0)
    return EXIT_OK


def cmd_solve_alpha(args) -> int:
    t0 = time.perf_counter()
    sys = _system(args)
    v_lf = _require(args, "v_lf", "--v-lf")
    sys.with_performance(v_lf)  # validates the model invariant before any work
    out = _out_dir(args)
    rep = adaptation.solve_alpha_for_theta(sys, v_lf, tol=args.tol, step=args.step)
    _write_solution(out, args, sys, rep, t0)
    return EXIT_OK


def _parse_range(text):
    if text is None:
        raise ConfigError("missing required field 'beta_range' (pass --beta-range a:b:n)")
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("--beta-range must look like a:b:n")
    try:
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ConfigError(f"bad --beta-range {text!r}: {exc}") from exc
    if n < 1 or not (math.isfinite(a) and math.isfinite(b)) or a <= 0 or b < a:
        raise ConfigError(f"empty or invalid beta range {text!r}")
    return np.linspace(a, b, n) if n > 1 else np.array([a])


SWEEP_COLUMNS = ["beta", "theta", "junction_x1", "junction_x2", "residual", "valid18", "valid20", "valid21", "status"]


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    sys = _system(args)
    betas = _parse_range(args.beta_range)
    out = _out_dir(args)
    rows = adaptation.sweep(sys, betas, tol=args.tol, step=args.step)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            v = r.validity
            flags = ["" if v is None else int(getattr(v, k)) for k in ("eq18", "eq20", "eq21")]
            w.writerow([_fmt(r.beta), _fmt(r.theta), *(_fmt(x) for x in r.junction[:2]), _fmt(r.residual),
                        *flags, r.status])
    write_json(out / "resolved_config.json", _resolved(args, sys))
    write_json(out / "timing.json", {"wall_time": time.perf_counter() - t0})
    ok = sum(r.status == "success" for r in rows)
    print(json.dumps({"rows": len(rows), "success": ok}))
    return EXIT_OK if ok else EXIT_SOLVER


def _teb_from_args(args):
    """TEB from a previous report, or by solving inline."""
    sys = _system(args)
    if args.report is not None:
        try:
            doc = json.loads(Path(args.report).read_text())
            theta, beta = float(doc["theta"]), float(doc["beta"])
            if "model" in doc:
                sys = system_from_dict(doc["model"])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"cannot use report {args.report}: {exc}") from exc
        s = sys.with_performance(theta)
        cap = CaptivitySet.for_system(s, beta)
        bar = build_barrier(s, cap, step=args.step, close_on_nup=False)
    elif args.alpha is not None:
        rep = adaptation.solve_theta_for_alpha(sys, args.alpha, tol=args.tol, step=args.step)
        s, cap, bar = rep.system, CaptivitySet.for_system(rep.system, rep.beta), rep.barrier
    elif args.v_lf is not None:
        rep = adaptation.solve_alpha_for_theta(sys, args.v_lf, tol=args.tol, step=args.step)
        s, cap, bar = rep.system, CaptivitySet.for_system(rep.system, rep.beta), rep.barrier
    else:
        raise ConfigError("simulate needs --report, --alpha or --v-lf")
    return s, build_teb(s, cap, bar)


def _parse_x0(text, n):
    try:
        v = np.array([float(t) for t in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"bad --x0 {text!r}") from exc
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ConfigError(f"--x0 needs {n} finite comma-separated values")
    return v


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    s, teb = _teb_from_args(args)
    out = _out_dir(args)
    horizon = 20.0 if args.horizon is None else args.horizon
    dt = 1e-3 if args.dt is None else args.dt
    seed = 0 if args.seed is None else args.seed
    lines = []
    if args.x0 is not None:
        x0 = _parse_x0(args.x0, s.state_dim)
        res = simulate(s, teb, SimConfig(horizon=horizon, dt=dt, planner_policy=OptimalEscape(), x0=x0))
        res.to_csv(out / "trajectory.csv")
        summary = {"runs": 1, "escapes": int(res.escaped), "worst_max_norm": res.max_norm, "seed": seed}
        lines.append(res.states)
    else:
        mc = monte_carlo_invariance(s, teb, args.runs, seed, horizon=horizon, dt=dt)
        summary = mc.to_dict()
    write_json(out / "summary.json", summary)
    write_json(out / "resolved_config.json", _resolved(args, s))
    write_json(out / "timing.json", {"wall_time": time.perf_counter() - t0})
    write_teb_svg(out / "simulate.svg", teb, {"trajectories": lines} if lines else None)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_SAFETY if summary["escapes"] else EXIT_OK


def cmd_export(args) -> int:
    t0 = time.perf_counter()
    sys = _system(args)
    alpha = _require(args, "alpha", "--alpha")
    v_lf = _require(args, "v_lf", "--v-lf")
    out = _out_dir(args)
    s = sys.with_performance(v_lf)
    cap = CaptivitySet.for_system(s, alpha)
    bar = build_barrier(s, cap, step=args.step, close_on_nup=True, anchors=compute_bnup(s, cap))
    for k, piece in enumerate(bar.pieces):
        name = "right" if piece.origin.state[0] > 0 else "left" if piece.origin.state[0] < 0 else str(k)
        piece.to_csv(out / f"surface_{name}.csv")
    teb = _write_geometry(out, s, alpha, bar)
    write_json(out / "resolved_config.json", _resolved(args, sys))
    write_json(out / "timing.json", {"wall_time": time.perf_counter() - t0})
    print(json.dumps({"wte": teb.wte, "junction": list(bar.junction)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ceteb", description="Tracking error bounds from captivity-escape games.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--model", help="model JSON (default: chauffeur with v_hf=1, omega=2*pi)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--tol", type=float, default=adaptation.DEFAULT_TOL, help="residual tolerance")
        sp.add_argument("--step", type=float, default=DEFAULT_STEP, help="integrator step (s)")
        sp.add_argument("--config", help="resolved_config.json of an earlier run")
        return sp

    sp = common(sub.add_parser("solve-theta", help="planner performance for a given margin"))
    sp.add_argument("--alpha", type=float)
    sp.set_defaults(func=cmd_solve_theta)

    sp = common(sub.add_parser("solve-alpha", help="margin for a given planner performance"))
    sp.add_argument("--v-lf", dest="v_lf", type=float)
    sp.set_defaults(func=cmd_solve_alpha)

    sp = common(sub.add_parser("sweep", help="tabulate solved performance over margins"))
    sp.add_argument("--beta-range", dest="beta_range")
    sp.set_defaults(func=cmd_sweep)

    sp = common(sub.add_parser("simulate", help="closed-loop invariance checks"))
    sp.add_argument("--report", help="report.json from solve-theta/solve-alpha")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--v-lf", dest="v_lf", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--runs", type=int, default=1000)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--x0", help="single optimal-escape run from this state, e.g. 0,-0.24")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("export", help="barrier and TEB geometry for a fixed (alpha, v_lf)"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--v-lf", dest="v_lf", type=float)
    sp.set_defaults(func=cmd_export)
    return p


def _apply_config(args):
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if doc.get("command") != args.command:
        raise ConfigError(f"config was written by '{doc.get('command')}', not '{args.command}'")
    for k, v in doc.get("params", {}).items():
        if hasattr(args, k) and v is not None:
            setattr(args, k, v)
    if "model" in doc and args.model is None:
        args.model_doc = doc["model"]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            _apply_config(args)
        return args.func(args)
    except (ConfigError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=_sys.stderr)
        return EXIT_INFEASIBLE
    except SafetyViolation as exc:
        print(f"safety violation: {exc}", file=_sys.stderr)
        return EXIT_SAFETY
    except (NoRoot, ValidityFailed, NoBnupError, BarrierOpen, GeometryError, CetebError) as exc:
        print(f"solver failure: {exc}", file=_sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
