"""Command-line harness.

``mcafem run`` executes one or more drivers and writes, per run, a CSV log,
a two-column ``.dat`` file for gnuplot, optional mesh dumps and a shared
``summary.json``.  ``mcafem report`` reads CSV logs back and prints slopes,
final errors and ESOLVE counts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import problems
from .algorithm import (MODES, AlgoConfig, ConvergenceLog, LogRecord, compute_slope,
                        default_theta2, run)
from .mesh import ClosureError, write_mesh
from .solvers import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

CSV_HEADER = ["k", "n_elems", "n_dofs", "lambda", "lambda_err", "eta_total",
              "j_k", "esolve", "wall_ms"]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid command line configuration."""


@dataclass
class RunConfig:
    problem: str = "ex1"
    mesh: Optional[str] = None
    modes: list = field(default_factory=lambda: ["algc"])
    degree: int = 1
    theta1: float = 0.4
    theta2: Optional[float] = None
    nev: int = 1
    max_elements: int = 40000
    max_iterations: Optional[int] = None
    lin_tol: float = 1e-10
    eig_tol: float = 1e-10
    precond: str = "sgs"
    out: str = "results"
    export_mesh_every: int = 0
    truth: bool = False
    truth_factor: int = 4
    timing: bool = True
    jobs: int = 1

    def algo_config(self, mode: str) -> AlgoConfig:
        return AlgoConfig(theta1=self.theta1, theta2=self.theta2, degree=self.degree,
                          max_elements=self.max_elements, max_iterations=self.max_iterations,
                          nev=self.nev, lin_tol=self.lin_tol, eig_tol=self.eig_tol,
                          precond=self.precond, mode=mode, timing=self.timing)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _unit_interval(name):
    def conv(text):
        val = float(text)
        if not 0 < val < 1:
            raise argparse.ArgumentTypeError(f"{name} must satisfy 0 < {name} < 1, got {val}")
        return val
    return conv


def _positive(kind, name):
    def conv(text):
        val = kind(text)
        if val <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {val}")
        return val
    return conv


def _run_arguments(p):
    p.add_argument("--problem", default="ex1", choices=["ex1", "ex2", "ex3", "custom"])
    p.add_argument("--mesh", help="mesh file for --problem custom")
    p.add_argument("--mode", action="append", choices=sorted(MODES),
                   help="driver; repeat to run several (default algc)")
    p.add_argument("--degree", type=int, default=1, choices=[1, 2])
    p.add_argument("--theta1", type=_unit_interval("theta1"), default=0.4)
    p.add_argument("--theta2", type=_unit_interval("theta2"), default=None,
                   help="decision parameter (default 0.6 for P1, 0.4 for P2)")
    p.add_argument("--nev", type=_positive(int, "nev"), default=1)
    p.add_argument("--max-elements", type=_positive(int, "max-elements"), default=40000)
    p.add_argument("--max-iterations", type=_positive(int, "max-iterations"), default=None)
    p.add_argument("--lin-tol", type=_unit_interval("lin-tol"), default=1e-10)
    p.add_argument("--eig-tol", type=_unit_interval("eig-tol"), default=1e-10)
    p.add_argument("--precond", default="sgs", choices=["sgs", "amg", "jacobi", "none"])
    p.add_argument("--out", default="results")
    p.add_argument("--export-mesh-every", type=int, default=0, metavar="K",
                   help="dump mesh and indicators every K iterations (0 = never)")
    p.add_argument("--truth", action="store_true",
                   help="compute the reference eigenvalue by an adaptive P2 run")
    p.add_argument("--no-timing", action="store_true", help="log wall_ms as 0")
    p.add_argument("--jobs", type=_positive(int, "jobs"), default=1)


def parse_config(args) -> RunConfig:
    """Validated :class:`RunConfig` from ``run`` flags (without the subcommand)."""
    p = _Parser(prog="mcafem run")
    _run_arguments(p)
    try:
        ns = p.parse_args(list(args))
    except argparse.ArgumentTypeError as exc:
        raise ConfigError(str(exc)) from None
    if ns.problem == "custom" and not ns.mesh:
        raise ConfigError("--problem custom requires --mesh PATH")
    if ns.mesh and ns.problem != "custom":
        raise ConfigError("--mesh is only used with --problem custom")
    if ns.export_mesh_every < 0:
        raise ConfigError("--export-mesh-every must be nonnegative")
    modes = []
    for m in ns.mode or ["algc"]:
        if MODES[m] not in modes:
            modes.append(MODES[m])
    theta2 = ns.theta2 if ns.theta2 is not None else default_theta2(ns.degree)
    return RunConfig(problem=ns.problem, mesh=ns.mesh, modes=modes, degree=ns.degree,
                     theta1=ns.theta1, theta2=theta2, nev=ns.nev,
                     max_elements=ns.max_elements, max_iterations=ns.max_iterations,
                     lin_tol=ns.lin_tol, eig_tol=ns.eig_tol, precond=ns.precond,
                     out=ns.out, export_mesh_every=ns.export_mesh_every, truth=ns.truth,
                     timing=not ns.no_timing, jobs=ns.jobs)


# -- CSV logs ---------------------------------------------------------------

def _num(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def write_log_csv(log_: ConvergenceLog, path):
    if not log_.records:
        raise ValueError("refusing to write an empty log")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in log_.records:
            w.writerow([r.k, r.n_elems, r.n_dofs, _num(r.lam), _num(r.lam_err),
                        _num(r.eta), r.j_k, int(bool(r.esolve)), _num(r.wall_ms)])


def read_log_csv(path, mode="", problem="", degree=0) -> ConvergenceLog:
    """Inverse of :func:`write_log_csv`; raises ``ValueError`` on malformed input."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing or unexpected CSV header")
    out = ConvergenceLog(mode, problem, degree)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"{path}:{i}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            out.records.append(LogRecord(
                k=int(row[0]), n_elems=int(row[1]), n_dofs=int(row[2]), lam=float(row[3]),
                lam_err=float(row[4]) if row[4] else None, eta=float(row[5]),
                j_k=int(row[6]), esolve=bool(int(row[7])), wall_ms=float(row[8])))
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from None
    if not out.records:
        raise ValueError(f"{path}: no records")
    return out


def write_dat(log_: ConvergenceLog, path):
    """``n_dofs value`` pairs; the value is the eigenvalue error when known, else eta."""
    fld = "lam_err" if all(r.lam_err is not None for r in log_.records) else "eta"
    with open(path, "w") as fh:
        fh.write(f"# n_dofs {fld}\n")
        for r in log_.records:
            fh.write(f"{r.n_dofs} {_num(getattr(r, fld))}\n")


# -- running ----------------------------------------------------------------

def _problem(cfg: RunConfig):
    return problems.get_problem(cfg.problem, cfg.mesh)


def _stem(cfg: RunConfig, mode: str) -> str:
    return f"{cfg.problem}_{mode}_p{cfg.degree}"


def truth_solve(cfg: RunConfig) -> float:
    """Reference eigenvalue from adaptive P2 multilevel correction at a larger cap."""
    prob = dataclasses.replace(_problem(cfg), reference=None)
    acfg = AlgoConfig(theta1=cfg.theta1, degree=2, nev=cfg.nev,
                      max_elements=cfg.truth_factor * cfg.max_elements,
                      lin_tol=min(cfg.lin_tol, 1e-12), eig_tol=min(cfg.eig_tol, 1e-12),
                      precond=cfg.precond, mode="algc", timing=False)
    return run(prob, acfg).records[-1].lam


def _execute(cfg: RunConfig, mode: str, reference, reference_note):
    prob = _problem(cfg)
    if reference is not None:
        prob = dataclasses.replace(prob, reference=reference, reference_note=reference_note)
    stem = _stem(cfg, mode)
    hook = None
    if cfg.export_mesh_every > 0:
        def hook(k, space, ind, u):
            if k % cfg.export_mesh_every == 0:
                write_mesh(space.mesh, os.path.join(cfg.out, f"{stem}_k{k:03d}.mesh"),
                           ind.values)
    lg = run(prob, cfg.algo_config(mode), on_mesh=hook)
    csv_path = os.path.join(cfg.out, stem + ".csv")
    write_log_csv(lg, csv_path)
    write_dat(lg, os.path.join(cfg.out, stem + ".dat"))
    return mode, csv_path, lg


def _summary_entry(lg: ConvergenceLog, csv_path) -> dict:
    last = lg.records[-1]
    entry = {"csv": os.path.basename(csv_path), "iterations": len(lg),
             "final_elements": last.n_elems, "final_dofs": last.n_dofs,
             "final_lambda": last.lam, "final_lambda_err": last.lam_err,
             "final_eta": last.eta, "esolve_meshes": lg.esolve_meshes,
             "full_eigensolve_dims": lg.full_eigensolves,
             "augmented_solve_dims": lg.augmented_solves}
    for fld, key in (("lam_err", "slope_lambda_err"), ("eta", "slope_eta")):
        try:
            entry[key] = compute_slope(lg, fld, window=min(8, len(lg)))
        except ValueError:
            entry[key] = None
    return entry


def run_command(cfg: RunConfig, stream=sys.stdout) -> dict:
    os.makedirs(cfg.out, exist_ok=True)
    prob = _problem(cfg)
    reference, note = prob.reference, prob.reference_note
    if cfg.truth:
        reference = truth_solve(cfg)
        note = (f"truth solve: adaptive P2 multilevel correction, "
                f"cap {cfg.truth_factor * cfg.max_elements} elements")
    jobs = [(cfg, m, reference, note) for m in cfg.modes]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_execute, *zip(*jobs)))
    else:
        results = [_execute(*j) for j in jobs]
    summary = {"problem": prob.name, "degree": cfg.degree, "theta1": cfg.theta1,
               "theta2": cfg.theta2, "nev": cfg.nev, "max_elements": cfg.max_elements,
               "reference": reference, "reference_note": note, "runs": {}}
    for mode, csv_path, lg in results:
        summary["runs"][mode] = _summary_entry(lg, csv_path)
        last = lg.records[-1]
        err = "" if last.lam_err is None else f" err={last.lam_err:.3e}"
        print(f"{mode}: {len(lg)} iterations, {last.n_dofs} dofs, "
              f"lambda={last.lam:.15g}{err} -> {csv_path}", file=stream)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# -- report -----------------------------------------------------------------

def _guess_mode(path):
    base = os.path.basename(path)
    for m in ("algc", "direct", "uniform"):
        if f"_{m}_" in base or base.startswith(m):
            return m
    return "?"


def _guess_degree(path):
    base = os.path.splitext(os.path.basename(path))[0]
    return 2 if base.endswith("_p2") else 1


def report(log_paths, window: int = 8) -> str:
    """Text summary of CSV logs: slopes, final errors, ESOLVE counts."""
    log_paths = list(log_paths)
    if not log_paths:
        raise ConfigError("report needs at least one CSV log")
    lines, rows = [], []
    for path in log_paths:
        mode = _guess_mode(path)
        lg = read_log_csv(path, mode=mode)
        w = min(window, len(lg))
        slopes = {}
        for fld in ("lam_err", "eta"):
            try:
                slopes[fld] = compute_slope(lg, fld, window=w)
            except ValueError:
                slopes[fld] = None
        last = lg.records[-1]
        n_esolve = sum(r.esolve for r in lg.records)
        rows.append((os.path.basename(path), mode, len(lg), last.n_dofs,
                     last.lam_err, slopes["lam_err"], slopes["eta"], n_esolve))
        fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
        msg = (f"{os.path.basename(path)} [{mode}]: {len(lg)} iterations, "
               f"final dofs {last.n_dofs}, final lambda {last.lam:.15g}")
        if last.lam_err is not None:
            msg += f", final error {last.lam_err:.3e}"
        msg += (f"; slope(lambda_err) {fmt(slopes['lam_err'])}, "
                f"slope(eta) {fmt(slopes['eta'])} over last {w}; ESOLVE on {n_esolve} meshes")
        lines.append(msg)
        s = slopes["lam_err"]
        # well short of the rate -degree that smooth eigenfunctions allow
        if mode == "uniform" and s is not None and s > -0.85 * _guess_degree(path):
            lines.append(f"  note: slope {s:.2f} is suboptimal (singularity)")
    if len({r[1] for r in rows}) > 1:
        lines.append("")
        lines.append(f"{'log':<28} {'mode':<8} {'iters':>5} {'dofs':>8} "
                     f"{'lam_err':>10} {'slope':>7} {'eta_sl':>7} {'esolve':>6}")
        for name, mode, it, nd, err, s1, s2, ne in rows:
            e = "n/a" if err is None else f"{err:.3e}"
            a = "n/a" if s1 is None else f"{s1:.3f}"
            b = "n/a" if s2 is None else f"{s2:.3f}"
            lines.append(f"{name:<28} {mode:<8} {it:>5} {nd:>8} {e:>10} {a:>7} {b:>7} {ne:>6}")
    return "\n".join(lines)


# -- entry point ------------------------------------------------------------

def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: mcafem {run,report} ...\n"
              "  run     execute drivers and write CSV/JSON logs (mcafem run --help)\n"
              "  report  summarize CSV logs (mcafem report LOG.csv ...)")
        return EXIT_OK if argv else EXIT_CONFIG
    cmd, rest = argv[0], argv[1:]
    try:
        if cmd == "run":
            if rest and rest[0] in ("-h", "--help"):
                p = argparse.ArgumentParser(prog="mcafem run")
                _run_arguments(p)
                p.print_help()
                return EXIT_OK
            cfg = parse_config(rest)
            run_command(cfg)
        elif cmd == "report":
            print(report(rest))
        else:
            raise ConfigError(f"unknown command {cmd!r}; use 'run' or 'report'")
    except (SolverError, ClosureError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, FileNotFoundError) as exc:
        # bad flags, unreadable mesh or malformed CSV
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
