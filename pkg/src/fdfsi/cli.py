"""Command-line front end.

Usage::

    fdfsi run <config> [--precond diag|tri] [--out DIR]
    fdfsi bench <config> --levels N
    fdfsi validate <config>
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config
from .output import StatsTable, run_stats_table, sig3, write_monitors_csv, write_stats_csv, write_vtk
from .saddle import PRECONDITIONERS, SolverError
from .simulator import SimulationError, Simulator

log = logging.getLogger("fdfsi")


def run_scenario(scenario, run: RunConfig, n_steps=None, write_snapshots: bool = True):
    """Run one scenario and write VTK snapshots and CSV tables into ``run.out_dir``."""
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulator(scenario, run.precond, run.degree)

    def snapshot(state):
        if write_snapshots:
            write_vtk(state, sim, out / f"{scenario.name}_{state.step:05d}")

    result = sim.run(n_steps, run.stride, snapshot)
    write_stats_csv(run_stats_table(result), out / "stats.csv")
    write_monitors_csv(result.monitors, out / "monitors.csv")
    return result


def bench_mesh_refinement(scenario, levels: int, n_steps=None, degree=None, preconds=PRECONDITIONERS):
    """Run both preconditioners on ``levels`` meshes, doubling the resolution each time.

    Returns ``{precond: StatsTable}`` with one summary row per level.
    """
    if levels < 2:
        raise ValueError("a refinement study needs at least 2 levels")
    tables = {pc: StatsTable() for pc in preconds}
    for level in range(levels):
        sc = scenario.refined(2 ** level) if level else scenario
        for pc in preconds:
            kw = {} if degree is None else {"degree": degree}
            result = Simulator(sc, pc, **kw).run(n_steps, stride=10 ** 9)
            tables[pc].add(**result.summary())
            log.info("level %d %s: %s", level, pc, result.summary())
    return tables


def format_bench(tables) -> str:
    """Side-by-side table in the layout of the usual refinement study."""
    pcs = list(tables)
    head = ["dofs", "T_ass", "T_coup"]
    for pc in pcs:
        head += [f"{pc}:nit", f"{pc}:its", f"{pc}:T_sol", f"{pc}:T_tot"]
    lines = ["  ".join(f"{h:>12}" for h in head)]
    first = tables[pcs[0]]
    for i, row in enumerate(first.rows):
        cells = [row["dofs"], row["T_ass"], row["T_coup"]]
        for pc in pcs:
            r = tables[pc].rows[i]
            cells += [r["nit"], r["its"], r["T_sol"], r["T_tot"]]
        lines.append("  ".join(f"{sig3(c):>12}" for c in cells))
    return "\n".join(lines)


def _describe(scenario, run) -> str:
    s = scenario
    law = f"linear kappa={s.kappa}" if s.model == "linear" else f"exponential gamma={s.gamma} eta={s.eta}"
    return (f"{s.name}: fluid {s.fluid_n}x{s.fluid_n}, {s.solid_kind} {s.solid_n[0]}x{s.solid_n[1]}, {law}, "
            f"nu={s.nu}, rho={s.rho}, dt={s.dt}, T={s.T} ({s.n_steps} steps), precond={run.precond}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdfsi", description="Fictitious-domain FSI solver")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every time step")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("config")
    r.add_argument("--precond", choices=PRECONDITIONERS)
    r.add_argument("--out", default="out")
    r.add_argument("--steps", type=int, help="override the number of time steps")
    r.add_argument("--stride", type=int, help="snapshot stride")
    r.add_argument("--degree", type=int, help="coupling quadrature degree")
    r.add_argument("--no-vtk", action="store_true", help="skip VTK snapshots")
    b = sub.add_parser("bench", help="mesh-refinement study with both preconditioners")
    b.add_argument("config")
    b.add_argument("--levels", type=int, required=True)
    b.add_argument("--steps", type=int, help="time steps per run (default: full horizon)")
    b.add_argument("--out", default="out")
    v = sub.add_parser("validate", help="check a configuration file")
    v.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        scenario, run = parse_config(args.config)
        if args.command == "validate":
            print(f"ok  {_describe(scenario, run)}")
            return 0
        if args.command == "run":
            run = replace(run, out_dir=args.out,
                          precond=args.precond or run.precond,
                          stride=args.stride or run.stride,
                          degree=args.degree or run.degree)
            print(_describe(scenario, run))
            result = run_scenario(scenario, run, args.steps, write_snapshots=not args.no_vtk)
            summary = result.summary()
            print("  ".join(f"{k}={sig3(v)}" for k, v in summary.items()))
            print(f"wrote {Path(run.out_dir) / 'stats.csv'}")
            return 0
        if args.command == "bench":
            tables = bench_mesh_refinement(scenario, args.levels, args.steps, run.degree)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for pc, table in tables.items():
                write_stats_csv(table, out / f"bench_{pc}.csv")
            print(format_bench(tables))
            return 0
    except (ConfigError, SimulationError, SolverError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
