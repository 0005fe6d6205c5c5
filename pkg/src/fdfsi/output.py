"""Legacy ASCII VTK snapshots and CSV statistics tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import pressure_cell_means, shift_pressure

STATS_FIELDS = ("dofs", "T_ass", "T_coup", "nit", "its", "T_sol", "T_tot")
MONITOR_FIELDS = ("t", "area", "area_drift", "energy", "div_norm", "div_rel", "u_max")
VTK_QUAD = 9


def sig3(x) -> str:
    """Three significant digits (integers are written as such)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.3g}"


@dataclass
class StatsTable:
    """Rows of ``dofs, T_ass, T_coup, nit, its, T_sol, T_tot``."""

    rows: list = field(default_factory=list)

    def add(self, **row) -> None:
        missing = set(STATS_FIELDS) - set(row)
        extra = set(row) - set(STATS_FIELDS)
        if missing or extra:
            raise ValueError(f"stats row must have exactly the fields {STATS_FIELDS}")
        self.rows.append({k: row[k] for k in STATS_FIELDS})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def run_stats_table(result) -> StatsTable:
    """Summary row followed by one row per time step."""
    table = StatsTable()
    table.add(**result.summary())
    for s in result.steps:
        table.add(dofs=result.dofs, T_ass=s.T_ass, T_coup=s.T_coup, nit=s.nit, its=s.its, T_sol=s.T_sol,
                  T_tot=s.T_ass + s.T_coup + s.T_sol * max(s.nit, 1))
    return table


def write_stats_csv(table: StatsTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_FIELDS)
        for row in table.rows:
            w.writerow([sig3(row[k]) for k in STATS_FIELDS])


def read_stats_csv(path) -> StatsTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    table = StatsTable()
    for r in rows:
        table.add(**{k: float(r[k]) for k in STATS_FIELDS})
    return table


def write_monitors_csv(monitors, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MONITOR_FIELDS)
        for m in monitors:
            w.writerow([repr(float(m[k])) for k in MONITOR_FIELDS])


def _write_grid(fh, title, points, cells):
    fh.write("# vtk DataFile Version 3.0\n")
    fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    fh.write(f"POINTS {len(points)} double\n")
    for x, y in points:
        fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
    fh.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
    for c in cells:
        fh.write("4 " + " ".join(str(int(v)) for v in c) + "\n")
    fh.write(f"CELL_TYPES {len(cells)}\n")
    fh.write(f"{VTK_QUAD}\n" * len(cells))


def _write_vectors(fh, name, vx, vy):
    fh.write(f"VECTORS {name} double\n")
    for a, b in zip(vx, vy):
        fh.write(f"{float(a)!r} {float(b)!r} 0.0\n")


def write_vtk(state, sim, prefix):
    """Write ``<prefix>_fluid.vtk`` and ``<prefix>_solid.vtk``; returns both paths.

    The fluid file holds the velocity at the grid vertices and the
    zero-mean pressure as a cell mean; the solid file holds the deformed
    positions with the multiplier as point data.
    """
    prefix = Path(prefix)
    fluid_path = prefix.with_name(prefix.name + "_fluid.vtk")
    solid_path = prefix.with_name(prefix.name + "_solid.vtk")
    fm, vd = sim.fluid_mesh, sim.vdofs
    nv = fm.n_nodes  # grid vertices are the first Q2 nodes
    p = pressure_cell_means(fm, shift_pressure(fm, state.p))
    with open(fluid_path, "w") as fh:
        _write_grid(fh, f"fluid t={state.t!r}", fm.nodes, fm.elements)
        fh.write(f"POINT_DATA {nv}\n")
        _write_vectors(fh, "velocity", state.u[:nv], state.u[vd.n_nodes:vd.n_nodes + nv])
        fh.write(f"CELL_DATA {fm.n_elements}\nSCALARS pressure double 1\nLOOKUP_TABLE default\n")
        for v in p:
            fh.write(f"{float(v)!r}\n")
    sm = sim.solid_mesh
    ns = sm.n_nodes
    with open(solid_path, "w") as fh:
        _write_grid(fh, f"solid t={state.t!r}", np.column_stack([state.X[:ns], state.X[ns:]]), sm.elements)
        fh.write(f"POINT_DATA {ns}\n")
        _write_vectors(fh, "multiplier", state.lam[:ns], state.lam[ns:])
    return fluid_path, solid_path


def read_vtk(path) -> dict:
    """Minimal reader for the files written by :func:`write_vtk`."""
    tokens = Path(path).read_text().split("\n")
    if not tokens[0].startswith("# vtk DataFile"):
        raise ValueError(f"{path} is not a legacy VTK file")
    out = {"point_data": {}, "cell_data": {}}
    i, target = 4, None
    while i < len(tokens):
        parts = tokens[i].split()
        i += 1
        if not parts:
            continue
        key = parts[0]
        if key == "POINTS":
            n = int(parts[1])
            out["points"] = np.array([[float(v) for v in tokens[i + k].split()] for k in range(n)])
            i += n
        elif key == "CELLS":
            n = int(parts[1])
            out["cells"] = np.array([[int(v) for v in tokens[i + k].split()[1:]] for k in range(n)])
            i += n
        elif key == "CELL_TYPES":
            n = int(parts[1])
            out["cell_types"] = np.array([int(tokens[i + k]) for k in range(n)])
            i += n
        elif key in ("POINT_DATA", "CELL_DATA"):
            target = "point_data" if key == "POINT_DATA" else "cell_data"
            out[target + "_count"] = int(parts[1])
        elif key == "VECTORS":
            n = out[target + "_count"]
            out[target][parts[1]] = np.array([[float(v) for v in tokens[i + k].split()] for k in range(n)])
            i += n
        elif key == "SCALARS":
            n = out[target + "_count"]
            i += 1  # LOOKUP_TABLE
            out[target][parts[1]] = np.array([float(tokens[i + k]) for k in range(n)])
            i += n
    return out
