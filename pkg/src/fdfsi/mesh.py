"""Quadrilateral meshes for the fluid box and the solid reference domain,
plus the degree-of-freedom maps of the Q2 / P1-discontinuous / Q1 spaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, floor, pi

import numpy as np

from .geometry import REF_CORNERS, bilinear_jacobian, q1_shape

VELOCITY_Q2 = "velocity-Q2"
PRESSURE_P1DC = "pressure-P1dc"
SOLID_Q1 = "solid-Q1"
DOF_KINDS = (VELOCITY_Q2, PRESSURE_P1DC, SOLID_Q1)


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class CartesianGrid:
    """Index arithmetic for a uniform axis-aligned grid (cell id = j*nx + i)."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int
    ny: int

    @property
    def hx(self) -> float:
        return (self.xmax - self.xmin) / self.nx

    @property
    def hy(self) -> float:
        return (self.ymax - self.ymin) / self.ny

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.xmax - self.xmin, self.ymax - self.ymin))

    def cell_box(self, cell: int):
        j, i = divmod(int(cell), self.nx)
        x0 = self.xmin + i * self.hx
        y0 = self.ymin + j * self.hy
        return x0, x0 + self.hx, y0, y0 + self.hy


@dataclass(frozen=True)
class Mesh:
    """Conforming quadrilateral mesh.

    ``boundary_edges`` maps a boundary label to an ``(m, 2)`` array of vertex
    pairs.  Cartesian meshes also carry ``grid`` for O(1) point location.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: dict = field(default_factory=dict)
    grid: CartesianGrid | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def boundary_tags(self) -> dict:
        """Vertex ids per boundary label (corner vertices appear under two labels)."""
        return {tag: np.unique(e) for tag, e in self.boundary_edges.items()}

    def element_corners(self, X=None) -> np.ndarray:
        """Corner coordinates (ne, 4, 2), optionally of displaced nodes ``X`` (n, 2)."""
        pts = self.nodes if X is None else X
        return pts[self.elements]

    def element_areas(self, X=None) -> np.ndarray:
        c = self.element_corners(X)
        x, y = c[..., 0], c[..., 1]
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    def area(self) -> float:
        return float(self.element_areas().sum())

    def corner_jacobians(self) -> np.ndarray:
        c = self.element_corners()
        return np.stack([bilinear_jacobian(ci, REF_CORNERS)[1] for ci in c])

    def nearest_node(self, point) -> int:
        d = np.hypot(*(self.nodes - np.asarray(point, dtype=float)).T)
        return int(np.argmin(d))


def _structured(px, py, tags=("bottom", "right", "top", "left")):
    """Tensor mesh from 1D node coordinates; returns nodes, elements, edges."""
    nx, ny = len(px) - 1, len(py) - 1
    X, Y = np.meshgrid(px, py, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    v0 = idx[:-1, :-1].ravel()
    elements = np.column_stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1])
    b, r, t, l = tags
    edges = {
        b: np.column_stack([idx[0, :-1], idx[0, 1:]]),
        r: np.column_stack([idx[:-1, -1], idx[1:, -1]]),
        t: np.column_stack([idx[-1, 1:], idx[-1, :-1]]),
        l: np.column_stack([idx[1:, 0], idx[:-1, 0]]),
    }
    return nodes, elements, edges


def build_cartesian_mesh(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Uniform ``nx`` by ``ny`` grid on the box ``(xmin, xmax, ymin, ymax)``."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"grid dimensions must be positive integers, got {nx}x{ny}")
    xmin, xmax, ymin, ymax = map(float, domain)
    if not (xmax > xmin and ymax > ymin):
        raise MeshError(f"degenerate box {domain}")
    nx, ny = int(nx), int(ny)
    px = np.linspace(xmin, xmax, nx + 1)
    py = np.linspace(ymin, ymax, ny + 1)
    nodes, elements, edges = _structured(px, py)
    return Mesh(nodes, elements, edges, CartesianGrid(xmin, xmax, ymin, ymax, nx, ny))


def build_rect_mesh(box, nx: int, ny: int) -> Mesh:
    return build_cartesian_mesh(nx, ny, box)


def build_annulus_quarter_mesh(nr: int, ntheta: int, r_in: float = 0.3, r_out: float = 0.5) -> Mesh:
    """Polar product grid of the quarter annulus ``r_in <= |s| <= r_out``, ``s >= 0``.

    Labels: ``inner``, ``outer``, ``bottom`` (theta = 0), ``left`` (theta = pi/2).
    """
    if nr < 1 or ntheta < 1:
        raise MeshError(f"annulus resolution must be positive, got {nr}x{ntheta}")
    r = np.linspace(r_in, r_out, nr + 1)
    th = np.linspace(0.0, pi / 2, ntheta + 1)
    R, T = np.meshgrid(r, th, indexing="xy")
    nodes = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    # exact zeros on the symmetry axes
    nodes[np.isclose(T.ravel(), pi / 2), 0] = 0.0
    _, elements, edges = _structured(r, th, tags=("bottom", "outer", "left", "inner"))
    return Mesh(nodes, elements, edges)


def locate_cells(mesh: Mesh, bbox) -> np.ndarray:
    """Cells of a Cartesian mesh whose closed extent meets the closed box ``bbox``.

    ``bbox = (xmin, xmax, ymin, ymax)``.  Pure index arithmetic; cells that
    merely touch the box are included.
    """
    g = mesh.grid
    if g is None:
        raise MeshError("locate_cells needs a Cartesian mesh")
    xmin, xmax, ymin, ymax = bbox
    if xmax < g.xmin or xmin > g.xmax or ymax < g.ymin or ymin > g.ymax:
        return np.zeros(0, dtype=np.int64)
    i0 = max(ceil((xmin - g.xmin) / g.hx) - 1, 0)
    i1 = min(floor((xmax - g.xmin) / g.hx), g.nx - 1)
    j0 = max(ceil((ymin - g.ymin) / g.hy) - 1, 0)
    j1 = min(floor((ymax - g.ymin) / g.hy), g.ny - 1)
    if i1 < i0 or j1 < j0:
        return np.zeros(0, dtype=np.int64)
    jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1), indexing="ij")
    return (jj * g.nx + ii).ravel().astype(np.int64)


# Q2 local nodes: lexicographic 3x3 on the reference square, index = 3*j + i
Q2_REF_NODES = np.array([[x, y] for y in (-1.0, 0.0, 1.0) for x in (-1.0, 0.0, 1.0)])
_Q2_CORNER_LOCAL = (0, 2, 8, 6)
_Q2_EDGE_LOCAL = ((1, 0, 1), (5, 1, 2), (7, 2, 3), (3, 3, 0))  # (local, v_a, v_b)


@dataclass(frozen=True)
class DofMap:
    """Element-to-global index map of one finite element space.

    Vector spaces number their unknowns component-major: the ``c``-th
    component of scalar node ``k`` is unknown ``c * n_nodes + k``.
    """

    kind: str
    cell_nodes: np.ndarray
    cell_dofs: np.ndarray
    n_nodes: int
    ncomp: int
    node_coords: np.ndarray
    edge_nodes: dict = field(default_factory=dict, repr=False)

    @property
    def ndofs(self) -> int:
        return self.n_nodes * self.ncomp

    def component(self, c: int) -> slice:
        return slice(c * self.n_nodes, (c + 1) * self.n_nodes)

    def boundary_nodes(self, mesh: Mesh, tag: str) -> np.ndarray:
        """Scalar node ids lying on the boundary edges labelled ``tag``."""
        if tag not in mesh.boundary_edges:
            raise MeshError(f"unknown boundary tag {tag!r}")
        edges = mesh.boundary_edges[tag]
        ids = [edges.ravel()]
        if self.kind == VELOCITY_Q2:
            ids.append(np.array([self.edge_nodes[tuple(sorted(map(int, e)))] for e in edges]))
        elif self.kind != SOLID_Q1:
            raise MeshError(f"{self.kind} has no boundary nodes")
        return np.unique(np.concatenate(ids))


def build_dof_maps(mesh: Mesh, kind: str) -> DofMap:
    if kind == SOLID_Q1:
        return DofMap(
            SOLID_Q1,
            mesh.elements.copy(),
            np.hstack([mesh.elements, mesh.elements + mesh.n_nodes]),
            mesh.n_nodes,
            2,
            mesh.nodes.copy(),
        )
    if kind == PRESSURE_P1DC:
        ne = mesh.n_elements
        cell_dofs = 3 * np.arange(ne)[:, None] + np.arange(3)[None, :]
        centers = mesh.element_corners().mean(axis=1)
        return DofMap(PRESSURE_P1DC, cell_dofs, cell_dofs, 3 * ne, 1, np.repeat(centers, 3, axis=0))
    if kind == VELOCITY_Q2:
        return _q2_dofmap(mesh)
    raise MeshError(f"unknown dof map kind {kind!r}; expected one of {DOF_KINDS}")


def _q2_dofmap(mesh: Mesh) -> DofMap:
    nv, ne = mesh.n_nodes, mesh.n_elements
    cell_nodes = np.empty((ne, 9), dtype=np.int64)
    edge_nodes = {}
    next_id = nv
    for e, verts in enumerate(mesh.elements):
        for loc, v in zip(_Q2_CORNER_LOCAL, verts):
            cell_nodes[e, loc] = v
        for loc, a, b in _Q2_EDGE_LOCAL:
            key = tuple(sorted((int(verts[a]), int(verts[b]))))
            node = edge_nodes.get(key)
            if node is None:
                node = edge_nodes[key] = next_id
                next_id += 1
            cell_nodes[e, loc] = node
    cell_nodes[:, 4] = next_id + np.arange(ne)
    n_nodes = next_id + ne
    coords = np.empty((n_nodes, 2))
    corners = mesh.element_corners()
    # straight-sided elements: Q2 nodes are bilinear images of the reference nodes
    coords[cell_nodes] = np.einsum("qa,eai->eqi", q1_shape(Q2_REF_NODES), corners)
    cell_dofs = np.hstack([cell_nodes, cell_nodes + n_nodes])
    return DofMap(VELOCITY_Q2, cell_nodes, cell_dofs, n_nodes, 2, coords, edge_nodes)
