"""Command-line front end.

Subcommands::

    mfgpd solve <config>          run one primal-dual solve and write outputs
    mfgpd bench-linsolve <config> inner-iteration table over a sweep
    mfgpd cond-estimate <config>  condition numbers of Q over a sweep
    mfgpd info <snapshot>         describe a snapshot file

``<config>`` is an INI file, ``preset:<name>`` for a shipped preset, or a
``manifest.json`` from an earlier run (its echoed config is replayed).
Exit codes: 0 success, 1 invalid config, 2 unconverged solve, 3 I/O error.
The ``MFG_OUTPUT_DIR`` environment variable overrides ``[output] directory``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, check_multigrid_size, load_config
from .grid import GridSpec
from .io import (
    SnapshotError,
    format_seconds,
    snapshot_info,
    snapshot_steps,
    write_field_snapshot,
    write_json,
)
from .krylov import arnoldi_condition_estimate, sparse_condition_estimate
from .multigrid import build_hierarchy, mg_preconditioner
from .operators import apply_Q, assemble_Q, multiplier_shape
from .primal_dual import (
    ConfigError,
    SolverBreakdown,
    constraint_residual,
    fp_residual,
    hjb_residual,
    mass_deviation,
    solve_mfg,
    turnpike_distance,
)

logger = logging.getLogger("mfgpd")

EXIT_OK, EXIT_CONFIG, EXIT_UNCONVERGED, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "MFG_OUTPUT_DIR"


def output_dir(cfg: RunConfig) -> Path:
    override = os.environ.get(OUTPUT_ENV)
    out = Path(override) if override else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header_lines(cfg: RunConfig, command: str) -> list[str]:
    lines = [f"# mfgpd {__version__} {command}"]
    lines += [f"# {line}" for line in cfg.to_ini().splitlines() if line.strip()]
    return lines


def _write_csv(path: Path, header: list[str], columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.6g}"
    return str(x)


# --- solve -----------------------------------------------------------------


def run_solve(cfg: RunConfig) -> tuple[int, dict]:
    grid = cfg.grid
    coupling = cfg.coupling()
    out = output_dir(cfg)
    t0 = time.perf_counter()
    sol = solve_mfg(grid, coupling, cfg.cp)
    total = time.perf_counter() - t0

    hjb = hjb_residual(sol.u, sol.m, coupling, grid)
    fp = fp_residual(sol.m, sol.u, grid)
    mass = mass_deviation(sol.m, grid, total=grid.h**2 * float(np.sum(sol.mbar)))
    dist = turnpike_distance(sol.m, None, grid)

    written = []
    steps = snapshot_steps(grid.N_T, cfg.stride)
    for fmt in cfg.formats:
        for k in steps:
            written.append(write_field_snapshot(sol.m[k], out / f"m_k{k:04d}.{fmt}", fmt))
        written.append(write_field_snapshot(sol.u, out / f"u.{fmt}", fmt))
    times = grid.T * np.arange(grid.N_T + 1) / grid.N_T
    _write_csv(
        out / "turnpike.csv",
        _header_lines(cfg, "solve"),
        ["k", "t", "distance"],
        [(k, f"{t:.17g}", f"{d:.17g}") for k, (t, d) in enumerate(zip(times, dist))],
    )
    _write_csv(
        out / "diagnostics.csv",
        _header_lines(cfg, "solve"),
        ["iteration", "change", "inner_iterations", "inner_converged", "objective",
         "time_linear", "time_prox", "time_other"],
        [
            (r.iteration, f"{r.change:.6e}", r.inner_iterations, int(r.inner_converged),
             f"{r.objective:.12e}", format_seconds(r.time_linear), format_seconds(r.time_prox),
             format_seconds(r.time_other))
            for r in sol.diagnostics
        ],
    )
    timings = sol.timings()
    manifest = {
        "version": __version__,
        "command": "solve",
        "config": cfg.echo(),
        "config_ini": cfg.to_ini(),
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residuals": {
            "hjb_sup": hjb[1],
            "hjb_rms": hjb[2],
            "fp_sup": fp[1],
            "fp_rms": fp[2],
            "constraint_rms": constraint_residual(sol.m, sol.w, sol.mbar, grid),
            "mass_deviation_max": float(np.max(np.abs(mass))),
            "min_density": float(np.min(sol.m[1:])),
        },
        "timings": {
            "total": float(format_seconds(total)),
            **{k: float(format_seconds(v)) for k, v in timings.items()},
        },
        "diagnostics": [
            {
                "iteration": r.iteration,
                "change": r.change,
                "inner_iterations": r.inner_iterations,
                "objective": r.objective,
            }
            for r in sol.diagnostics
        ],
        "files": sorted(p.name for p in written) + ["turnpike.csv", "diagnostics.csv"],
    }
    write_json(manifest, out / "manifest.json")
    logger.info(
        "solve: %s after %d iterations, mass deviation %.2e, outputs in %s",
        "converged" if sol.converged else "NOT converged",
        sol.iterations,
        manifest["residuals"]["mass_deviation_max"],
        out,
    )
    return (EXIT_OK if sol.converged else EXIT_UNCONVERGED), manifest


# --- bench-linsolve ----------------------------------------------------------


def _bench_entry(args):
    cfg, N_h, N_T, nu, solver, pc = args
    grid = GridSpec(N_h, N_T, cfg.grid.T, nu, cfg.grid.q)
    cp = dataclasses.replace(cfg.cp, linear_solver=solver, preconditioner=pc)
    counts = {f: [] for f in cfg.sweep.factors}
    solve_times = []
    t0 = time.perf_counter()
    sol = solve_mfg(grid, cfg.coupling(grid), cp)
    for r in sol.diagnostics:
        if not r.inner_history or r.rhs_norm == 0.0:
            continue  # zero right-hand side, no work
        solve_times.append(r.time_linear)
        for f in counts:
            reached = _iterations_to(r.inner_history, f, r.rhs_norm)
            counts[f].append((r.inner_iterations, False) if reached is None else (reached, True))
    return {
        "N_h": N_h,
        "N_T": N_T,
        "nu": nu,
        "solver": solver,
        "preconditioner": pc,
        "cp_iterations": sol.iterations,
        "converged": sol.converged,
        "solves": len(solve_times),
        "avg": {f: (float(np.mean([c for c, _ in v])) if v else float("nan")) for f, v in counts.items()},
        "reached": {f: all(ok for _, ok in v) for f, v in counts.items()},
        "avg_solve_seconds": float(np.mean(solve_times)) if solve_times else float("nan"),
        "total_seconds": time.perf_counter() - t0,
    }


def _iterations_to(history, factor, rhs_norm):
    """First iteration with residual <= factor * ||b||, or None if never reached."""
    for it, res in history:
        if res <= factor * rhs_norm:
            return it
    return None



def run_bench_linsolve(cfg: RunConfig, parallel: int = 0) -> tuple[int, list]:
    sw = cfg.sweep
    if not sw.nu or not sw.solvers:
        raise ConfigError("bench-linsolve needs non-empty sweep.nu and sweep.solvers", ("sweep.nu", "sweep.solvers"))
    sizes = sw.sizes or [(cfg.grid.N_h, cfg.grid.N_T)]
    for N_h, _ in sizes:
        if any(pc == "multigrid" for _, pc in sw.solvers):
            check_multigrid_size(N_h, cfg.cp, "sweep.sizes")
    out = output_dir(cfg)
    jobs = [(cfg, N_h, N_T, nu, s, pc) for (N_h, N_T) in sizes for nu in sw.nu for s, pc in sw.solvers]
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as pool:
            results = list(pool.map(_bench_entry, jobs))
    else:
        results = []
        for job in jobs:
            res = _bench_entry(job)
            logger.info(
                "bench N=%dx%d nu=%g %s+%s: %d CP iterations, averages %s",
                res["N_h"], res["N_T"], res["nu"], res["solver"], res["preconditioner"],
                res["cp_iterations"], {f"{f:g}": round(v, 3) for f, v in res["avg"].items()},
            )
            results.append(res)
    timed = parallel <= 1
    header = _header_lines(cfg, "bench-linsolve")
    if not timed:
        header.append("# parallel sweep: timing columns left empty")
    # a solve that stopped before reaching a level contributes its full count
    fcols = [f"avg_iter_{f:g}" for f in sw.factors] + [f"all_reached_{f:g}" for f in sw.factors]
    rows = []
    for r in results:
        rows.append(
            [_fmt(r["nu"]), r["N_h"], r["N_T"], r["solver"], r["preconditioner"], r["cp_iterations"],
             int(r["converged"]), r["solves"]]
            + [_fmt(r["avg"][f]) for f in sw.factors]
            + [int(r["reached"][f]) for f in sw.factors]
            + [format_seconds(r["avg_solve_seconds"]) if timed else ""]
        )
    _write_csv(
        out / "bench_linsolve.csv",
        header,
        ["nu", "N_h", "N_T", "solver", "preconditioner", "cp_iterations", "converged", "solves"]
        + fcols + ["avg_solve_seconds"],
        rows,
    )
    # table layout: one row per nu, one column per (solver, size, factor)
    keys = [(s, pc, n, f) for s, pc in sw.solvers for n in sizes for f in sw.factors]
    lookup = {(r["solver"], r["preconditioner"], (r["N_h"], r["N_T"]), r["nu"]): r for r in results}
    _write_csv(
        out / "bench_linsolve_table.csv",
        header,
        ["nu"] + [f"{s}+{pc}@{n[0]}x{n[1]}:{f:g}" for s, pc, n, f in keys],
        [[_fmt(nu)] + [_fmt(lookup[(s, pc, n, nu)]["avg"][f]) for s, pc, n, f in keys] for nu in sw.nu],
    )
    ok = all(r["converged"] for r in results)
    return (EXIT_OK if ok else EXIT_UNCONVERGED), results


# --- cond-estimate -----------------------------------------------------------


def run_cond_estimate(cfg: RunConfig) -> tuple[int, list]:
    sw = cfg.sweep
    if not sw.nu:
        raise ConfigError("cond-estimate needs a non-empty sweep.nu", ("sweep.nu",))
    sizes = sw.sizes or [(cfg.grid.N_h, cfg.grid.N_T)]
    if sw.preconditioned:
        for N_h, _ in sizes:
            check_multigrid_size(N_h, cfg.cp, "sweep.sizes")
    out = output_dir(cfg)
    rows, results = [], []
    for N_h, N_T in sizes:
        for nu in sw.nu:
            grid = GridSpec(N_h, N_T, cfg.grid.T, nu, cfg.grid.q)
            Q = assemble_Q(grid)
            lmin, lmax, kappa = sparse_condition_estimate(Q)
            entry = {"N_h": N_h, "N_T": N_T, "nu": nu, "lambda_min": lmin, "lambda_max": lmax, "kappa": kappa}
            if sw.preconditioned:
                hier = build_hierarchy(
                    grid, H=cfg.cp.mg_H, levels=cfg.cp.mg_levels, eta1=cfg.cp.eta1,
                    eta2=cfg.cp.eta2, cycle=cfg.cp.cycle,
                )
                P = mg_preconditioner(hier)
                shape = multiplier_shape(grid)
                n = Q.shape[0]
                op = lambda x: P.matvec(apply_Q(x.reshape(shape), grid).ravel())
                entry["kappa_mg"] = arnoldi_condition_estimate(op, n, iters=min(60, n))[2]
            logger.info("cond N=%dx%d nu=%g kappa=%.4e", N_h, N_T, nu, kappa)
            results.append(entry)
            rows.append(
                [_fmt(nu), N_h, N_T, f"{lmin:.10e}", f"{lmax:.10e}", f"{kappa:.10e}"]
                + ([f"{entry['kappa_mg']:.6e}"] if sw.preconditioned else [])
            )
    _write_csv(
        out / "cond_estimate.csv",
        _header_lines(cfg, "cond-estimate"),
        ["nu", "N_h", "N_T", "lambda_min", "lambda_max", "kappa"] + (["kappa_mg"] if sw.preconditioned else []),
        rows,
    )
    return EXIT_OK, results


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgpd", description="Primal-dual solver for discrete mean field games.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="run one solve")
    p.add_argument("config")
    p = sub.add_parser("bench-linsolve", help="average inner Krylov iterations over a sweep")
    p.add_argument("config")
    p.add_argument("--parallel", type=int, default=0, metavar="N", help="worker processes (drops timing columns)")
    p = sub.add_parser("cond-estimate", help="condition numbers of the normal operator")
    p.add_argument("config")
    p = sub.add_parser("info", help="describe a snapshot file")
    p.add_argument("snapshot")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "info":
            print(json.dumps(snapshot_info(args.snapshot), indent=2))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "solve":
            code, _ = run_solve(cfg)
        elif args.command == "bench-linsolve":
            code, _ = run_bench_linsolve(cfg, parallel=args.parallel)
        else:
            code, _ = run_cond_estimate(cfg)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SnapshotError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverBreakdown as exc:
        print(f"solver breakdown: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED


if __name__ == "__main__":
    sys.exit(main())
