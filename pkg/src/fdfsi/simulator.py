"""Semi-implicit backward-Euler time loop for the immersed-solid problem.

Each step reassembles the coupling matrix at the previous solid position,
solves the 4-field block system (or runs Newton for a nonlinear law) and
advances ``u, p, X, lambda``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .coupling import DEFAULT_DEGREE, assemble_coupling
from .fem import (
    BcSpec,
    assemble_fluid_blocks,
    assemble_solid_mass,
    fix_pressure_nullspace,
    shift_pressure,
    stokes_operator,
)
from .mesh import (
    PRESSURE_P1DC,
    SOLID_Q1,
    VELOCITY_Q2,
    build_annulus_quarter_mesh,
    build_cartesian_mesh,
    build_dof_maps,
    build_rect_mesh,
)
from .saddle import (
    BLOCK_TRI,
    PRECONDITIONERS,
    BlockPreconditioner,
    BlockSystem,
    build_block_system,
    coupling_blocks,
    factorize_block,
    gmres,
    newton_solve,
    solid_block,
)
from .solid import (
    EXPONENTIAL,
    LINEAR,
    ExponentialModel,
    LinearModel,
    assemble_solid_residual_tangent,
    elastic_energy,
    identity_coefficients,
)

log = logging.getLogger(__name__)

ANNULUS, BAR = "annulus", "bar"
SOLID_KINDS = (ANNULUS, BAR)
POINT, EDGE = "point", "edge"
FORCE_PROFILES = (POINT, EDGE)


class SimulationError(RuntimeError):
    """A step failed; ``step`` is the 1-based index of the failing step."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class ForceSpec:
    """External load on the solid, constant while ``t_start <= t <= t_end``.

    ``profile='point'`` loads the solid node nearest ``point``;
    ``profile='edge'`` spreads the same total load uniformly over the
    boundary label ``edge``.
    """

    magnitude: float = 0.0
    direction: tuple = (0.0, -1.0)
    point: tuple = (0.4, 0.5)
    profile: str = POINT
    edge: str = "right"
    t_start: float = 0.0
    t_end: float = 1.0

    def active(self, t: float, dt: float) -> bool:
        eps = 1e-9 * dt
        return self.magnitude != 0.0 and self.t_start - eps <= t <= self.t_end + eps


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-8
    restart: int = 200
    maxit: int = 2000
    newton_tol: float = 1e-6
    newton_maxit: int = 20


@dataclass(frozen=True)
class Scenario:
    """Complete description of one simulation."""

    name: str = "custom"
    fluid_n: int = 50
    fluid_box: tuple = (0.0, 1.0, 0.0, 1.0)
    solid_kind: str = ANNULUS
    solid_n: tuple = (13, 46)
    bar_box: tuple = (0.0, 0.4, 0.45, 0.55)
    annulus_radii: tuple = (0.3, 0.5)
    model: str = LINEAR
    kappa: float = 10.0
    gamma: float = 1.333
    eta: float = 9.242
    rho: float = 1.0
    nu: float = 0.1
    dt: float = 0.01
    T: float = 2.0
    stretch: float = 1.0
    bcs: dict = field(default_factory=lambda: {"bottom": "noslip", "right": "noslip", "top": "noslip",
                                               "left": "noslip"})
    force: ForceSpec = ForceSpec()
    solver: SolverSettings = SolverSettings()

    def __post_init__(self):
        for key in ("rho", "nu", "dt", "T", "stretch"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if self.T < self.dt * (1 - 1e-9):
            raise ValueError("T must be at least one time step")
        if self.solid_kind not in SOLID_KINDS:
            raise ValueError(f"unknown solid kind {self.solid_kind!r}; expected one of {SOLID_KINDS}")
        if self.model not in (LINEAR, EXPONENTIAL):
            raise ValueError(f"unknown model {self.model!r}")
        if self.force.profile not in FORCE_PROFILES:
            raise ValueError(f"unknown force profile {self.force.profile!r}")
        if self.fluid_n < 1 or min(self.solid_n) < 1:
            raise ValueError("mesh resolutions must be positive")

    @property
    def n_steps(self) -> int:
        n = round(self.T / self.dt)
        return max(int(n), 1)

    def material(self):
        if self.model == LINEAR:
            return LinearModel(self.kappa)
        return ExponentialModel(self.gamma, self.eta)

    def refined(self, factor: int = 2) -> "Scenario":
        """Same scenario with fluid and solid resolution multiplied by ``factor``."""
        return replace(self, fluid_n=self.fluid_n * factor, solid_n=tuple(n * factor for n in self.solid_n))


def annulus_scenario(**kw) -> Scenario:
    base = dict(
        name="annulus_linear", fluid_n=50, solid_kind=ANNULUS, solid_n=(13, 46), model=LINEAR, kappa=10.0,
        rho=1.0, nu=0.1, dt=0.01, T=2.0, stretch=1.4,
        bcs={"bottom": "slip", "left": "slip", "top": "noslip", "right": "noslip"},
    )
    base.update(kw)
    return Scenario(**base)


def bar_scenario(**kw) -> Scenario:
    base = dict(
        name="bar_nonlinear", fluid_n=42, solid_kind=BAR, solid_n=(36, 9), model=EXPONENTIAL,
        gamma=1.333, eta=9.242, rho=1.0, nu=0.2, dt=0.002, T=2.0, stretch=1.0,
        force=ForceSpec(magnitude=0.1, direction=(0.0, -1.0), point=(0.4, 0.5), t_start=0.0, t_end=1.0),
    )
    base.update(kw)
    return Scenario(**base)


@dataclass
class State:
    u: np.ndarray
    p: np.ndarray
    X: np.ndarray
    lam: np.ndarray
    t: float = 0.0
    step: int = 0

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u, self.p, self.X, self.lam])

    def copy(self) -> "State":
        return State(self.u.copy(), self.p.copy(), self.X.copy(), self.lam.copy(), self.t, self.step)


@dataclass
class StepStats:
    """Per-step counters; ``its`` and ``T_sol`` are averaged over Newton iterations."""

    step: int
    t: float
    T_ass: float
    T_coup: float
    nit: int
    its: float
    T_sol: float
    its_total: int = 0


@dataclass
class RunResult:
    scenario: Scenario
    precond: str
    dofs: int
    steps: list
    snapshots: list
    monitors: list
    final: State
    T_ass: float
    T_tot: float

    def summary(self) -> dict:
        """Averages over the time steps; ``its``/``T_sol`` per Newton iteration."""
        s = self.steps
        nit_total = sum(r.nit for r in s)
        its_total = sum(r.its_total for r in s)
        sol_total = sum(r.T_sol * r.nit for r in s)
        return {
            "dofs": self.dofs,
            "T_ass": self.T_ass,
            "T_coup": float(np.mean([r.T_coup for r in s])),
            "nit": nit_total / len(s),
            "its": its_total / max(nit_total, 1),
            "T_sol": sol_total / max(nit_total, 1),
            "T_tot": self.T_tot,
        }


class _NewtonStep:
    """Residual and Jacobian of one nonlinear backward-Euler step.

    ``rhs2`` is the unconstrained solid right-hand side and ``held`` the
    values of the wall-held solid unknowns.
    """

    def __init__(self, sim: "Simulator", Cf, rhs1, rhs2, held):
        self.sim = sim
        self.F11 = sim.F11
        self.rhs1, self.rhs2, self.held = rhs1, rhs2, held
        n = sim.sizes
        self.A12, self.A21 = coupling_blocks(Cf, n["u"], n["p"], n["X"])
        self.A22_lin = solid_block(sp.csr_matrix((n["X"], n["X"])), sim.Cs, sim.scenario.dt)
        self.n1 = n["u"] + n["p"]

    def residual(self, x):
        sim = self.sim
        x1, x2 = x[: self.n1], x[self.n1:]
        nX = sim.sizes["X"]
        S, _ = assemble_solid_residual_tangent(sim.solid_mesh, sim.sdofs, sim.material, x2[:nX], with_tangent=False)
        r1 = sim.A11 @ x1 + self.A12 @ x2 - self.rhs1
        r2 = self.A21 @ x1 + self.A22_lin @ x2 - self.rhs2
        r2[:nX] += S
        free = sim.solid_free
        r2 = free * r2 + (1.0 - free) * (x2 - self.held)
        return np.concatenate([r1, r2])

    def jacobian(self, x):
        sim = self.sim
        nX = sim.sizes["X"]
        _, K = assemble_solid_residual_tangent(sim.solid_mesh, sim.sdofs, sim.material, x[self.n1:self.n1 + nX])
        A22 = sim.constrain_solid(solid_block(K, sim.Cs, sim.scenario.dt))
        return BlockSystem(sim.A11, self.A12, self.A21, A22, self.rhs1, self.rhs2)


class Simulator:
    """Meshes, static operators and factorisations for one scenario."""

    def __init__(self, scenario: Scenario, precond: str = BLOCK_TRI, degree: int = DEFAULT_DEGREE):
        if precond not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {precond!r}; expected one of {PRECONDITIONERS}")
        self.scenario = scenario
        self.precond = precond
        self.degree = degree
        self.material = scenario.material()
        t0 = time.perf_counter()
        sc = scenario
        self.fluid_mesh = build_cartesian_mesh(sc.fluid_n, sc.fluid_n, sc.fluid_box)
        if sc.solid_kind == ANNULUS:
            nr, nth = sc.solid_n
            self.solid_mesh = build_annulus_quarter_mesh(nr, nth, *sc.annulus_radii)
        else:
            self.solid_mesh = build_rect_mesh(sc.bar_box, *sc.solid_n)
        self.vdofs = build_dof_maps(self.fluid_mesh, VELOCITY_Q2)
        self.pdofs = build_dof_maps(self.fluid_mesh, PRESSURE_P1DC)
        self.sdofs = build_dof_maps(self.solid_mesh, SOLID_Q1)
        self.sizes = {"u": self.vdofs.ndofs, "p": self.pdofs.ndofs, "X": self.sdofs.ndofs, "lam": self.sdofs.ndofs}
        self.dofs = sum(self.sizes.values())

        self.fluid = assemble_fluid_blocks(self.fluid_mesh, self.vdofs, self.pdofs, sc.nu, sc.rho, sc.dt)
        self.bcs = BcSpec(dict(sc.bcs))
        self.constrained = self.bcs.resolve(self.fluid_mesh, self.vdofs)
        self.free = sp.diags(self.bcs.free_mask(self.vdofs.ndofs).astype(float))
        Af = (self.free @ self.fluid.A @ self.free + sp.diags(1.0 - self.free.diagonal())).tocsr()
        Bf = (self.fluid.B @ self.free).tocsr()
        self.A11, _ = fix_pressure_nullspace(stokes_operator(Af, Bf), np.zeros(self.sizes["p"]), self.sizes["u"])
        self.solid_fixed = self._solid_wall_dofs()
        free_x = np.ones(self.sizes["X"])
        free_x[self.solid_fixed] = 0.0
        self.solid_free = np.concatenate([free_x, free_x])
        self.Cs = assemble_solid_mass(self.solid_mesh, self.sdofs)
        self.As = None
        if self.material.kind == LINEAR:
            _, self.As = assemble_solid_residual_tangent(self.solid_mesh, self.sdofs, self.material,
                                                         identity_coefficients(self.solid_mesh))
        self.T_ass = time.perf_counter() - t0

        self.F11 = factorize_block(self.A11, "A11")
        self.F22 = None
        if self.As is not None:
            self.F22 = factorize_block(self.constrain_solid(solid_block(self.As, self.Cs, sc.dt)), "A22")
        self.T_setup = time.perf_counter() - t0
        self.rest_energy = elastic_energy(self.solid_mesh, self.sdofs, self.material,
                                          identity_coefficients(self.solid_mesh))
        self.reference_area = self.solid_mesh.area()

    def _solid_wall_dofs(self) -> np.ndarray:
        """Solid position unknowns held by a fluid wall.

        A solid boundary label whose initial image lies on a side of the
        fluid box inherits that side's condition: both components for
        ``noslip``, the normal one for ``slip``.
        """
        xmin, xmax, ymin, ymax = self.scenario.fluid_box
        sides = {"left": (0, xmin), "right": (0, xmax), "bottom": (1, ymin), "top": (1, ymax)}
        tol = 1e-10 * self.fluid_mesh.grid.diameter
        X0 = self.initial_state().X
        ns = self.sdofs.n_nodes
        fixed = []
        for nodes in self.solid_mesh.boundary_tags.values():
            for side, (axis, value) in sides.items():
                if not np.all(np.abs(X0[axis * ns + nodes] - value) <= tol):
                    continue
                kind = self.bcs.conditions.get(side, "free")
                comps = {"noslip": (0, 1), "slip": (axis,)}.get(kind, ())
                fixed.extend(c * ns + nodes for c in comps)
        if not fixed:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(fixed))

    def constrain_solid(self, A22) -> sp.csr_matrix:
        """Identity rows and columns for wall-held positions and their multipliers."""
        D = sp.diags(self.solid_free)
        out = (D @ A22 @ D + sp.diags(1.0 - self.solid_free)).tocsr()
        out.sort_indices()
        return out

    # -- state ---------------------------------------------------------
    def initial_state(self) -> State:
        s = self.solid_mesh.nodes
        a = self.scenario.stretch
        X0 = np.concatenate([s[:, 0] / a, s[:, 1] * a])
        n = self.sizes
        return State(np.zeros(n["u"]), np.zeros(n["p"]), X0, np.zeros(n["lam"]), 0.0, 0)

    def external_force(self, t: float) -> np.ndarray:
        f = np.zeros(self.sizes["X"])
        fs = self.scenario.force
        if not fs.active(t, self.scenario.dt):
            return f
        d = np.asarray(fs.direction, dtype=float)
        d = d / np.linalg.norm(d)
        ns = self.sdofs.n_nodes
        if fs.profile == POINT:
            k = self.solid_mesh.nearest_node(fs.point)
            f[k] += fs.magnitude * d[0]
            f[ns + k] += fs.magnitude * d[1]
            return f
        edges = self.solid_mesh.boundary_edges[fs.edge]
        lengths = np.linalg.norm(np.diff(self.solid_mesh.nodes[edges], axis=1)[:, 0], axis=1)
        share = np.zeros(ns)
        np.add.at(share, edges.ravel(), np.repeat(0.5 * lengths, 2))
        share *= fs.magnitude / lengths.sum()
        f[:ns] += share * d[0]
        f[ns:] += share * d[1]
        return f

    # -- one step ------------------------------------------------------
    def coupling(self, X) -> sp.csr_matrix:
        Cf = assemble_coupling(X, self.fluid_mesh, self.vdofs, self.solid_mesh, self.sdofs, self.degree)
        return (sp.diags(self.solid_free[: self.sizes["X"]]) @ Cf @ self.free).tocsr()

    def advance(self, state: State):
        sc = self.scenario
        dt = sc.dt
        t_new = state.t + dt
        t0 = time.perf_counter()
        Cf = self.coupling(state.X)
        T_coup = time.perf_counter() - t0

        t0 = time.perf_counter()
        g1 = (sc.rho / dt) * (self.fluid.M @ state.u)
        g1[self.constrained] = 0.0
        g2 = -(1.0 / dt) * (self.Cs @ state.X)
        fext = self.external_force(t_new)
        held = np.zeros(2 * self.sizes["X"])
        held[self.solid_fixed] = state.X[self.solid_fixed]
        n1 = self.sizes["u"] + self.sizes["p"]
        st = sc.solver
        if self.As is not None:
            system = build_block_system(self.A11, Cf, self.As, self.Cs, dt, g1, g2, self.sizes["p"], fext)
            free = self.solid_free
            system.rhs2 = free * (system.rhs2 - system.A22 @ held) + (1.0 - free) * held
            system.A22 = self.constrain_solid(system.A22)
            T_ass = time.perf_counter() - t0
            t0 = time.perf_counter()
            P = BlockPreconditioner(self.precond, self.F11, self.F22, system.A21)
            x, its = gmres(system.matvec, system.rhs, P, tol=st.tol, restart=st.restart, maxit=st.maxit)
            T_sol = time.perf_counter() - t0
            nit, its_list = 1, [its]
        else:
            rhs1 = np.concatenate([g1, np.zeros(self.sizes["p"])])
            problem = _NewtonStep(self, Cf, rhs1, np.concatenate([fext, g2]), held)
            T_ass = time.perf_counter() - t0
            t0 = time.perf_counter()
            res = newton_solve(problem, state.stacked(), self.precond, tol=st.newton_tol, maxit=st.newton_maxit,
                               gmres_tol=st.tol, restart=st.restart, gmres_maxit=st.maxit)
            T_sol = (time.perf_counter() - t0) / max(res.nit, 1)
            x, nit, its_list = res.x, res.nit, res.its
        n = self.sizes
        u = x[: n["u"]]
        p = x[n["u"]:n1]
        X = x[n1:n1 + n["X"]]
        lam = x[n1 + n["X"]:]
        new = State(u.copy(), p.copy(), X.copy(), lam.copy(), t_new, state.step + 1)
        stats = StepStats(new.step, t_new, T_ass, T_coup, nit, float(np.mean(its_list)) if its_list else 0.0,
                          T_sol, int(sum(its_list)))
        return new, stats

    # -- diagnostics ---------------------------------------------------
    def monitors(self, state: State) -> dict:
        ns = self.sdofs.n_nodes
        pts = np.column_stack([state.X[:ns], state.X[ns:]])
        area = float(self.solid_mesh.element_areas(pts).sum())
        try:
            energy = elastic_energy(self.solid_mesh, self.sdofs, self.material, state.X)
        except ArithmeticError:
            energy = float("inf")
        Bu = float(np.linalg.norm(self.fluid.B @ state.u))
        unorm = float(np.linalg.norm(state.u))
        return {
            "t": state.t,
            "area": area,
            "area_drift": abs(area - self.reference_area) / self.reference_area,
            "energy": energy,
            "div_norm": Bu,
            "div_rel": Bu / unorm if unorm > 0 else 0.0,
            "u_max": float(np.max(np.abs(state.u))) if state.u.size else 0.0,
        }

    def run(self, n_steps: int | None = None, stride: int = 25, callback=None) -> RunResult:
        """Advance ``n_steps`` (default ``T / dt``) steps from the initial state.

        Snapshots are kept every ``stride`` steps plus the initial and final
        states; ``callback(state)`` is called on each of them.
        """
        t_start = time.perf_counter()
        n_steps = self.scenario.n_steps if n_steps is None else int(n_steps)
        if n_steps < 1:
            raise ValueError("need at least one step")
        state = self.initial_state()
        snapshots = [state.copy()]
        monitors = [self.monitors(state)]
        if callback:
            callback(state)
        steps = []
        for k in range(1, n_steps + 1):
            try:
                state, stats = self.advance(state)
            except Exception as exc:
                raise SimulationError(k, exc) from exc
            steps.append(stats)
            monitors.append(self.monitors(state))
            log.info("step %d t=%.4g nit=%d its=%.1f", k, state.t, stats.nit, stats.its)
            if k % stride == 0 or k == n_steps:
                snapshots.append(state.copy())
                if callback:
                    callback(state)
        T_tot = time.perf_counter() - t_start + self.T_setup
        return RunResult(self.scenario, self.precond, self.dofs, steps, snapshots, monitors, state,
                         self.T_ass, T_tot)

    def reported_pressure(self, state: State) -> np.ndarray:
        return shift_pressure(self.fluid_mesh, state.p)


def advance_step(sim: Simulator, state: State):
    return sim.advance(state)


def run(scenario: Scenario, precond: str = BLOCK_TRI, n_steps: int | None = None, stride: int = 25,
        degree: int = DEFAULT_DEGREE) -> RunResult:
    return Simulator(scenario, precond, degree).run(n_steps, stride)
