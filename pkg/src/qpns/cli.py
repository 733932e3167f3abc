"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 non-resonance failure,
4 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, SolverConfig
from .fourier import Field, sobolev_norm
from .inversion import NonConvergence, ReducedForm
from .measure import GoodSetPredicate, fitted_constant, rows_to_csv, sample_measure
from .nssolver import (NonResonanceError, build_reduced_form, check_nonresonance,
                       problem_from_config, solve_euler, solve_ns, nu_sweep, symmetry_report)
from .straighten import StraighteningError
from .toeplitz import NeumannDivergence, NeumannTruncation, SmallDivisorError

log = logging.getLogger("qpns")

EXIT_OK, EXIT_CONFIG, EXIT_RESONANCE, EXIT_CONVERGENCE = 0, 2, 3, 4
FIELD_FILE = "v_e.field"
REDUCED_FILE = "reduced.zip"


def _load_config(args) -> SolverConfig:
    cfg = SolverConfig.load(args.config) if args.config else SolverConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    if getattr(args, "nu", None) is not None:
        over["nu"] = args.nu
    if getattr(args, "gamma_list", None):
        over["gamma_list"] = [float(g) for g in args.gamma_list.split(",")]
    return cfg.replace(**over) if over else cfg


def _manifest(cfg: SolverConfig, command: str, results: dict) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(),
            "config_sha256": cfg.hash(), "seed": cfg.seed, "results": _clean(results)}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _euler(cfg: SolverConfig, out: Path):
    prob = problem_from_config(cfg)
    nonres = check_nonresonance(cfg) if cfg.eps > 0 else {}
    er = solve_euler(prob, cfg.newton_tol, cfg.newton_max, cfg.s0)
    (out / FIELD_FILE).write_bytes(er.v.to_bytes())
    res = {"newton_iterations": er.iterations, "relative_residual": er.residual,
           "newton_history": er.history, "norm_s0": sobolev_norm(er.v, cfg.s0),
           "norm_over_eps_a": sobolev_norm(er.v, cfg.s0) / cfg.eps ** cfg.a_exp if cfg.eps else 0.0,
           "odd_violation": er.v.parity_violation("odd"),
           "reality_violation": er.v.reality_violation(), **nonres}
    return er.v, res


def _load_or_solve_euler(cfg: SolverConfig, out: Path) -> Field:
    p = out / FIELD_FILE
    if p.exists():
        v = Field.from_bytes(p.read_bytes(), "odd")
        if v.lattice != cfg.lattice:
            raise ConfigError("stored Euler solution was computed on another lattice")
        return v
    v, res = _euler(cfg, out)
    _write_json(out / "solve-euler.json", _manifest(cfg, "solve-euler", res))
    return v


def _load_or_reduce(cfg: SolverConfig, out: Path, v: Field) -> ReducedForm:
    p = out / REDUCED_FILE
    if p.exists():
        return ReducedForm.load(p)
    rf = build_reduced_form(v, cfg)
    rf.save(p)
    return rf


def cmd_solve_euler(cfg: SolverConfig, out: Path) -> dict:
    _, res = _euler(cfg, out)
    print(f"Euler solution: {res['newton_iterations']} Newton steps, "
          f"relative residual {res['relative_residual']:.3e}, |v_e|_s0 = {res['norm_s0']:.6e}")
    return res


def cmd_reduce(cfg: SolverConfig, out: Path) -> dict:
    v = _load_or_solve_euler(cfg, out)
    t = time.perf_counter()
    rf = build_reduced_form(v, cfg)
    rf.save(out / REDUCED_FILE)
    log.info("reduction took %.1f s", time.perf_counter() - t)
    d = dict(rf.diagnostics)
    d["symmetry"] = symmetry_report(rf, v, cfg.eps)
    with open(out / "kam_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "step", "norm"])
        for h in d.get("smoothing", []):
            w.writerow(["smoothing", h["step"], repr(h["R_norm_minus_M"])])
        for h in d.get("kam", []):
            w.writerow(["kam", h["step"], repr(h["R_norm"])])
    print(f"Reduced form written to {out / REDUCED_FILE}")
    for h in d.get("kam", []):
        print(f"  KAM step {h['step']}: |R|_(-M,s0) = {h['R_norm']:.3e}")
    return d


def cmd_solve_ns(cfg: SolverConfig, out: Path) -> dict:
    v = _load_or_solve_euler(cfg, out)
    rf = _load_or_reduce(cfg, out, v)
    prob = problem_from_config(cfg)
    ap, fp = solve_ns(v, rf, prob, cfg.nu, cfg.s0, cfg.refine, cfg.fixpoint_tol, cfg.fixpoint_max)
    (out / f"v_nu_{cfg.nu:.3e}.field").write_bytes(fp.v.to_bytes())
    res = {"nu": cfg.nu, "approx_defect": ap.defect_norm, "identity_error": ap.identity_error,
           "picard_iterations": fp.iterations, "residual": fp.residual, "psi_norm": fp.psi_norm,
           "in_ball": fp.in_ball, "diff_norm": sobolev_norm(fp.v - v, cfg.s0)}
    print(f"nu = {cfg.nu:.3e}: |F_nu(v_nu)|_s0 = {fp.residual:.3e}, "
          f"|v_nu - v_e|_s0 = {res['diff_norm']:.6e}")
    return res


def cmd_sweep_nu(cfg: SolverConfig, out: Path) -> dict:
    v = _load_or_solve_euler(cfg, out)
    rf = _load_or_reduce(cfg, out, v)
    prob = problem_from_config(cfg)
    rep = nu_sweep(v, rf, prob, cfg.nu_grid, cfg.s0, cfg.threads, cfg.refine,
                   cfg.fixpoint_tol, cfg.fixpoint_max)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eps", "nu", "s", "diff_norm", "residual", "slope_fit"])
        for r in rep.rows:
            w.writerow([repr(cfg.eps), repr(r.nu), repr(cfg.s0), repr(r.diff_norm),
                        repr(r.residual), repr(rep.slope)])
    print(f"slope of log |v_nu - v_e|_s0 against log nu: {rep.slope:.4f} "
          f"(sup norm: {rep.sup_slope:.4f})")
    return {"slope": rep.slope, "sup_slope": rep.sup_slope, "slope_defined": rep.slope_defined,
            "rows": [r.__dict__ for r in rep.rows]}


def cmd_measure(cfg: SolverConfig, out: Path) -> dict:
    pred = GoodSetPredicate(cfg.lattice, cfg.tau_value)
    rows = sample_measure(cfg.box_value, cfg.gamma_list, pred.excluded_level, cfg.n_samples,
                          cfg.seed, cfg.d, cfg.threads)
    (out / "measure.csv").write_text(rows_to_csv(rows))
    for r in rows:
        print(f"gamma = {r.gamma:g}: excluded {r.excluded_fraction:.4f} "
              f"[{r.ci_low:.4f}, {r.ci_high:.4f}]")
    return {"rows": [r.__dict__ for r in rows], "C": fitted_constant(rows)}


COMMANDS = {"solve-euler": cmd_solve_euler, "reduce": cmd_reduce, "solve-ns": cmd_solve_ns,
            "sweep-nu": cmd_sweep_nu, "measure": cmd_measure}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpns", description="Quasi-periodic Euler and "
                                "Navier-Stokes solutions on the torus and their inviscid limit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON configuration file")
        s.add_argument("--out-dir", default=".", help="directory for artifacts")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "solve-ns":
            s.add_argument("--nu", type=float)
        if name == "measure":
            s.add_argument("--gamma-list", help="comma separated thresholds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonResonanceError, SmallDivisorError) as e:
        print(f"non-resonance failure: {e}", file=sys.stderr)
        return EXIT_RESONANCE
    except (NonConvergence, NeumannDivergence, NeumannTruncation, StraighteningError) as e:
        print(f"no convergence: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    _write_json(out / f"{args.command}.json", _manifest(cfg, args.command, res))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
