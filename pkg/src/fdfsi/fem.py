"""Assembly of the time-independent fluid and solid blocks.

Fluid: continuous Q2 velocity, discontinuous P1 pressure with the
physical-coordinate basis ``{1, x - xc, y - yc}`` per cell.  Solid: Q1 for
both the position and the multiplier.  Element integrals use a 3x3 Gauss rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import gauss_square, q1_shape, q1_shape_grad
from .mesh import PRESSURE_P1DC, SOLID_Q1, VELOCITY_Q2, DofMap, Mesh, MeshError

NOSLIP, SLIP, FREE = "noslip", "slip", "free"
BC_KINDS = (NOSLIP, SLIP, FREE)


def _l1d(t):
    return np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)


def _dl1d(t):
    return np.stack([t - 0.5, -2.0 * t, t + 0.5], axis=-1)


def q2_shape(xi) -> np.ndarray:
    """Biquadratic shape functions (..., 9), local index ``3*j + i``."""
    xi = np.asarray(xi, dtype=float)
    lx, ly = _l1d(xi[..., 0]), _l1d(xi[..., 1])
    return (ly[..., :, None] * lx[..., None, :]).reshape(*xi.shape[:-1], 9)


def q2_shape_grad(xi) -> np.ndarray:
    """Reference gradients (..., 9, 2) of the biquadratic shape functions."""
    xi = np.asarray(xi, dtype=float)
    lx, ly = _l1d(xi[..., 0]), _l1d(xi[..., 1])
    dx, dy = _dl1d(xi[..., 0]), _dl1d(xi[..., 1])
    gx = (ly[..., :, None] * dx[..., None, :]).reshape(*xi.shape[:-1], 9)
    gy = (dy[..., :, None] * lx[..., None, :]).reshape(*xi.shape[:-1], 9)
    return np.stack([gx, gy], axis=-1)


@dataclass
class ElementGeometry:
    """Per-element, per-quadrature-point data of the bilinear geometry map."""

    x: np.ndarray  # (ne, nq, 2) physical points
    jxw: np.ndarray  # (ne, nq) |det J| * weight
    inv_jac: np.ndarray  # (ne, nq, 2, 2), entry [i, j] = d xi_i / d x_j


def element_geometry(corners, points, weights) -> ElementGeometry:
    N = q1_shape(points)
    dN = q1_shape_grad(points)
    x = np.einsum("qa,eai->eqi", N, corners)
    J = np.einsum("eai,qaj->eqij", corners, dN)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(det <= 0.0):
        bad = int(np.nonzero((det <= 0.0).any(axis=1))[0][0])
        raise MeshError(f"element {bad} has a non-positive Jacobian")
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1] / det
    inv[..., 1, 1] = J[..., 0, 0] / det
    inv[..., 0, 1] = -J[..., 0, 1] / det
    inv[..., 1, 0] = -J[..., 1, 0] / det
    return ElementGeometry(x, det * np.asarray(weights)[None, :], inv)


def physical_gradients(ref_grad, inv_jac) -> np.ndarray:
    """(nq, nb, 2) reference gradients -> (ne, nq, nb, 2) physical gradients."""
    return np.einsum("qbi,eqij->eqbj", ref_grad, inv_jac)


def scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    """Sum element contributions ``vals`` (ne, nr, nc) into a CSR matrix."""
    r = np.broadcast_to(rows[:, :, None], vals.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], vals.shape).ravel()
    m = sp.coo_matrix((vals.ravel(), (r, c)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _symmetric(m) -> sp.csr_matrix:
    # (a + b) / 2 is bitwise symmetric, which removes roundoff asymmetry
    out = (0.5 * (m + m.T)).tocsr()
    out.sort_indices()
    return out


def _vector_block_diag(scalar):
    """(ne, n, n) scalar element matrices -> (ne, 2n, 2n) component-major."""
    ne, n, _ = scalar.shape
    out = np.zeros((ne, 2 * n, 2 * n))
    out[:, :n, :n] = scalar
    out[:, n:, n:] = scalar
    return out


def pressure_basis(x, centers) -> np.ndarray:
    """P1dc basis ``{1, x - xc, y - yc}`` at points x (ne, nq, 2) -> (ne, nq, 3)."""
    d = x - centers[:, None, :]
    return np.concatenate([np.ones(x.shape[:-1] + (1,)), d], axis=-1)


@dataclass
class FluidBlocks:
    M: sp.csr_matrix
    K: sp.csr_matrix
    B: sp.csr_matrix
    A: sp.csr_matrix
    rho: float
    nu: float
    dt: float


def assemble_fluid_blocks(mesh: Mesh, vdofs: DofMap, pdofs: DofMap, nu: float, rho: float, dt: float,
                          nquad: int = 3) -> FluidBlocks:
    """Velocity mass ``M``, viscous ``K``, divergence ``B`` and ``A = rho/dt M + K``.

    ``K_ij = nu (eps(phi_j), eps(phi_i))`` with the symmetric gradient, and
    ``B_ki = (div phi_i, psi_k)``.
    """
    if not (nu > 0 and rho > 0 and dt > 0):
        raise ValueError("viscosity, density and time step must be positive")
    if vdofs.kind != VELOCITY_Q2 or pdofs.kind != PRESSURE_P1DC:
        raise ValueError("expected Q2 velocity and P1dc pressure dof maps")
    rule = gauss_square(nquad)
    geo = element_geometry(mesh.element_corners(), rule.points, rule.weights)
    N = q2_shape(rule.points)  # (nq, 9)
    G = physical_gradients(q2_shape_grad(rule.points), geo.inv_jac)  # (ne, nq, 9, 2)

    mass = np.einsum("eq,qa,qb->eab", geo.jxw, N, N)
    lap = np.einsum("eq,eqai,eqbi->eab", geo.jxw, G, G)
    # (eps(N_a e_c), eps(N_b e_d)) = 1/2 (delta_cd grad N_a . grad N_b + d_d N_a d_c N_b)
    cross = np.einsum("eq,eqad,eqbc->ecadb", geo.jxw, G, G)  # [c, a, d, b]
    ne = mesh.n_elements
    Ke = 0.5 * _vector_block_diag(lap) + 0.5 * cross.reshape(ne, 18, 18)

    centers = mesh.element_corners().mean(axis=1)
    psi = pressure_basis(geo.x, centers)  # (ne, nq, 3)
    Be = np.einsum("eq,eqm,eqbd->emdb", geo.jxw, psi, G).reshape(ne, 3, 18)

    nv, npr = vdofs.ndofs, pdofs.ndofs
    M = _symmetric(scatter(vdofs.cell_dofs, vdofs.cell_dofs, _vector_block_diag(mass), (nv, nv)))
    K = _symmetric(scatter(vdofs.cell_dofs, vdofs.cell_dofs, nu * Ke, (nv, nv)))
    B = scatter(pdofs.cell_dofs, vdofs.cell_dofs, Be, (npr, nv))
    A = (rho / dt) * M + K
    A.sort_indices()
    return FluidBlocks(M, K, B, A.tocsr(), rho, nu, dt)


def _solid_element_data(mesh, nquad=3):
    rule = gauss_square(nquad)
    geo = element_geometry(mesh.element_corners(), rule.points, rule.weights)
    N = q1_shape(rule.points)
    G = physical_gradients(q1_shape_grad(rule.points), geo.inv_jac)
    return geo, N, G


def assemble_solid_mass(mesh: Mesh, sdofs: DofMap, nquad: int = 3) -> sp.csr_matrix:
    """Vector Q1 mass matrix ``(chi_l, chi_j)_B`` (component-major)."""
    if sdofs.kind != SOLID_Q1:
        raise ValueError("expected a solid Q1 dof map")
    geo, N, _ = _solid_element_data(mesh, nquad)
    mass = np.einsum("eq,qa,qb->eab", geo.jxw, N, N)
    n = sdofs.ndofs
    return _symmetric(scatter(sdofs.cell_dofs, sdofs.cell_dofs, _vector_block_diag(mass), (n, n)))


def assemble_solid_stiffness_linear(mesh: Mesh, sdofs: DofMap, kappa: float, nquad: int = 3) -> sp.csr_matrix:
    """``kappa (grad chi_j, grad chi_i)_B`` with the full gradient."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    geo, _, G = _solid_element_data(mesh, nquad)
    lap = np.einsum("eq,eqai,eqbi->eab", geo.jxw, G, G)
    n = sdofs.ndofs
    return _symmetric(scatter(sdofs.cell_dofs, sdofs.cell_dofs, kappa * _vector_block_diag(lap), (n, n)))


def assemble_solid_load(mesh: Mesh, sdofs: DofMap, nquad: int = 3) -> np.ndarray:
    """Scalar Q1 load vector ``(chi_l, 1)_B`` (length ``n_nodes``)."""
    geo, N, _ = _solid_element_data(mesh, nquad)
    vals = np.einsum("eq,qa->ea", geo.jxw, N)
    out = np.zeros(sdofs.n_nodes)
    np.add.at(out, sdofs.cell_nodes, vals)
    return out


def assemble_velocity_load(mesh: Mesh, vdofs: DofMap, f, nquad: int = 4) -> np.ndarray:
    """``(f, phi_i)_Omega`` for a vector field ``f(x, y) -> (fx, fy)``."""
    rule = gauss_square(nquad)
    geo = element_geometry(mesh.element_corners(), rule.points, rule.weights)
    N = q2_shape(rule.points)
    fx, fy = f(geo.x[..., 0], geo.x[..., 1])
    fx = np.broadcast_to(fx, geo.jxw.shape)
    fy = np.broadcast_to(fy, geo.jxw.shape)
    vals = np.concatenate(
        [np.einsum("eq,eq,qa->ea", geo.jxw, fx, N), np.einsum("eq,eq,qa->ea", geo.jxw, fy, N)], axis=1
    )
    out = np.zeros(vdofs.ndofs)
    np.add.at(out, vdofs.cell_dofs, vals)
    return out


@dataclass
class BcSpec:
    """Velocity boundary conditions per boundary label.

    ``conditions`` maps a label to ``noslip``, ``slip`` (normal component
    fixed) or ``free``.  ``values`` optionally gives Dirichlet data
    ``g(x, y) -> (gx, gy)``; default is homogeneous.
    """

    conditions: dict
    values: object = None
    constrained: np.ndarray = field(default=None, repr=False)

    def resolve(self, mesh: Mesh, vdofs: DofMap) -> np.ndarray:
        dofs = []
        for tag, kind in self.conditions.items():
            if tag not in mesh.boundary_edges:
                raise MeshError(f"unknown boundary tag {tag!r}")
            if kind not in BC_KINDS:
                raise ValueError(f"unknown boundary condition {kind!r} on {tag!r}")
            if kind == FREE:
                continue
            nodes = vdofs.boundary_nodes(mesh, tag)
            if kind == NOSLIP:
                comps = (0, 1)
            else:
                comps = (_normal_component(mesh, tag),)
            for c in comps:
                dofs.append(c * vdofs.n_nodes + nodes)
        self.constrained = np.unique(np.concatenate(dofs)) if dofs else np.zeros(0, dtype=np.int64)
        return self.constrained

    def data(self, vdofs: DofMap) -> np.ndarray:
        g = np.zeros(vdofs.ndofs)
        if self.values is not None:
            gx, gy = self.values(vdofs.node_coords[:, 0], vdofs.node_coords[:, 1])
            g[: vdofs.n_nodes] = gx
            g[vdofs.n_nodes:] = gy
        out = np.zeros(vdofs.ndofs)
        out[self.constrained] = g[self.constrained]
        return out

    def free_mask(self, n: int) -> np.ndarray:
        mask = np.ones(n, dtype=bool)
        mask[self.constrained] = False
        return mask


def _normal_component(mesh, tag):
    e = mesh.boundary_edges[tag]
    d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
    scale = np.abs(d).max()
    if np.all(np.abs(d[:, 1]) <= 1e-12 * scale):
        return 1
    if np.all(np.abs(d[:, 0]) <= 1e-12 * scale):
        return 0
    raise ValueError(f"slip condition needs an axis-aligned boundary, {tag!r} is not")


def apply_velocity_bcs(A, B, rhs_u, rhs_p, bcs: BcSpec, vdofs: DofMap):
    """Symmetric row-column elimination of the constrained velocity unknowns.

    Constrained rows and columns of ``A`` become identity rows, the matching
    columns of ``B`` are zeroed, and the known values are moved to the
    right-hand sides.  Returns ``(A, B, rhs_u, rhs_p)``.
    """
    if bcs.constrained is None:
        raise ValueError("BcSpec not resolved; call resolve(mesh, dofmap) first")
    n = A.shape[0]
    g = bcs.data(vdofs)
    free = bcs.free_mask(n).astype(float)
    D = sp.diags(free)
    rhs_u = np.asarray(rhs_u, dtype=float) - A @ g
    rhs_p = np.asarray(rhs_p, dtype=float) + B @ g  # block row reads -B u = rhs_p
    rhs_u[bcs.constrained] = g[bcs.constrained]
    Abc = (D @ A @ D + sp.diags(1.0 - free)).tocsr()
    Bbc = (B @ D).tocsr()
    Abc.sort_indices()
    Bbc.sort_indices()
    return Abc, Bbc, rhs_u, rhs_p


#: pressure unknown pinned to zero (constant mode of cell 0)
PINNED_PRESSURE = 0


def stokes_operator(A, B) -> sp.csr_matrix:
    """``[[A, -B^T], [-B, 0]]``."""
    npr = B.shape[0]
    return sp.bmat([[A, -B.T], [-B, sp.csr_matrix((npr, npr))]], format="csr")


def fix_pressure_nullspace(A11, rhs_p, n_velocity: int, pin: int = PINNED_PRESSURE):
    """Pin one pressure unknown of ``[[A, -B^T], [-B, 0]]`` to zero.

    The pinned row and column are replaced by the identity; returns the new
    operator and right-hand side.
    """
    n = A11.shape[0]
    k = n_velocity + pin
    keep = np.ones(n)
    keep[k] = 0.0
    D = sp.diags(keep)
    out = (D @ A11 @ D + sp.csr_matrix(([1.0], ([k], [k])), shape=(n, n))).tocsr()
    out.sort_indices()
    rhs_p = np.array(rhs_p, dtype=float)
    rhs_p[pin] = 0.0
    return out, rhs_p


def pressure_cell_means(mesh: Mesh, p) -> np.ndarray:
    """Element means of a P1dc field (the linear modes have zero cell mean)."""
    return np.asarray(p).reshape(-1, 3)[:, 0].copy()


def pressure_mean(mesh: Mesh, p) -> float:
    areas = mesh.element_areas()
    return float(np.dot(areas, pressure_cell_means(mesh, p)) / areas.sum())


def shift_pressure(mesh: Mesh, p) -> np.ndarray:
    """Return ``p`` shifted to zero mean over the fluid box."""
    out = np.array(p, dtype=float).reshape(-1, 3)
    out[:, 0] -= pressure_mean(mesh, p)
    return out.ravel()


def evaluate_q2(mesh: Mesh, vdofs: DofMap, u, points):
    """Velocity values at reference ``points`` of every element: (ne, nq, 2)."""
    N = q2_shape(points)
    u = np.asarray(u)
    ux = u[: vdofs.n_nodes][vdofs.cell_nodes]
    uy = u[vdofs.n_nodes:][vdofs.cell_nodes]
    return np.stack([ux @ N.T, uy @ N.T], axis=-1)


def velocity_l2_error(mesh: Mesh, vdofs: DofMap, u, exact, nquad: int = 5) -> float:
    rule = gauss_square(nquad)
    geo = element_geometry(mesh.element_corners(), rule.points, rule.weights)
    uh = evaluate_q2(mesh, vdofs, u, rule.points)
    ex, ey = exact(geo.x[..., 0], geo.x[..., 1])
    err = (uh[..., 0] - ex) ** 2 + (uh[..., 1] - ey) ** 2
    return float(np.sqrt(np.sum(err * geo.jxw)))


def pressure_l2_error(mesh: Mesh, pdofs: DofMap, p, exact, nquad: int = 5) -> float:
    """L2 error after removing the mean of both fields."""
    rule = gauss_square(nquad)
    geo = element_geometry(mesh.element_corners(), rule.points, rule.weights)
    centers = mesh.element_corners().mean(axis=1)
    ph = np.einsum("eqm,em->eq", pressure_basis(geo.x, centers), np.asarray(p).reshape(-1, 3))
    pe = exact(geo.x[..., 0], geo.x[..., 1])
    area = geo.jxw.sum()
    d = ph - pe
    d = d - np.sum(d * geo.jxw) / area
    return float(np.sqrt(np.sum(d * d * geo.jxw)))
