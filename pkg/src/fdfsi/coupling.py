"""Fluid-structure coupling matrix over non-matching meshes.

Each mapped solid element is clipped against the fluid cells its bounding
box touches; every clipped piece is fan-triangulated and integrated in
physical coordinates, with the solid basis evaluated at the pulled-back
point and the measure converted by ``1 / |det grad_s X_h|``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import q2_shape
from .geometry import (
    REF_CORNERS,
    GeometryError,
    bilinear_coefficients,
    bilinear_jacobian,
    fan_triangles_batch,
    inverse_bilinear_batch,
    polygon_area,
    q1_shape,
    triangle_areas,
    triangle_quadrature,
)
from .mesh import DofMap, Mesh, locate_cells

DEFAULT_DEGREE = 6
SLIVER_RTOL = 1e-14


class SolidEscapedError(GeometryError):
    """A mapped solid element left the fluid box."""


@dataclass
class IntersectionFragment:
    """Piece of a mapped solid element inside one fluid cell."""

    solid_element: int
    fluid_cell: int
    polygon: np.ndarray
    # filled in by fragment_quadrature
    points: np.ndarray = field(default=None, repr=False)
    solid_ref: np.ndarray = field(default=None, repr=False)
    fluid_ref: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)


def clip_to_box(poly, xmin, xmax, ymin, ymax, tol):
    """Sutherland-Hodgman against an axis-aligned box, on plain float tuples.

    Same inside test and cleanup policy as :func:`geometry.clip_polygon`.
    """
    # (axis, sign, offset): inside when sign * (p[axis] - offset) >= -tol
    planes = ((1, 1.0, ymin), (0, -1.0, xmax), (1, -1.0, ymax), (0, 1.0, xmin))
    out = list(poly)
    for axis, sgn, off in planes:
        if not out:
            return []
        inp = out
        out = []
        s = inp[-1]
        ds = sgn * (s[axis] - off)
        for v in inp:
            dv = sgn * (v[axis] - off)
            if dv >= -tol:
                if ds < -tol:
                    t = ds / (ds - dv)
                    out.append((s[0] + t * (v[0] - s[0]), s[1] + t * (v[1] - s[1])))
                out.append(v)
            elif ds > tol:
                t = ds / (ds - dv)
                out.append((s[0] + t * (v[0] - s[0]), s[1] + t * (v[1] - s[1])))
            s, ds = v, dv
    return _cleanup_tuples(out, tol)


def _cleanup_tuples(pts, tol):
    removed = True
    while removed and len(pts) >= 3:
        removed = False
        n = len(pts)
        for i in range(n):
            ax, ay = pts[i - 1]
            bx, by = pts[i]
            cx, cy = pts[(i + 1) % n]
            abx, aby = bx - ax, by - ay
            acx, acy = cx - ax, cy - ay
            lab = (abx * abx + aby * aby) ** 0.5
            lac = (acx * acx + acy * acy) ** 0.5
            if lab <= tol:
                dist = 0.0
            elif lac <= tol:
                dist = float("inf")
            else:
                dist = abs(acx * aby - acy * abx) / lac
            if dist <= tol:
                del pts[i]
                removed = True
                break
    return pts if len(pts) >= 3 else []


def _shoelace(pts):
    s = 0.0
    px, py = pts[-1]
    for x, y in pts:
        s += px * y - x * py
        px, py = x, y
    return 0.5 * s


def default_escape_tol(fluid_mesh: Mesh) -> float:
    g = fluid_mesh.grid
    return 1e-3 * min(g.hx, g.hy)


def _image_checks(images, fluid_mesh, escape_tol, first_elem=0):
    """Validate image quads (m, 4, 2); returns their bounding boxes."""
    jac_det = bilinear_jacobian(images[:, None], REF_CORNERS)[1]
    bad = np.nonzero((jac_det <= 0.0).any(axis=1))[0]
    if bad.size:
        raise GeometryError(f"solid element {first_elem + int(bad[0])} has a degenerate or inverted image")
    g = fluid_mesh.grid
    if escape_tol is None:
        escape_tol = default_escape_tol(fluid_mesh)
    lo = images.min(axis=1)
    hi = images.max(axis=1)
    out = ((lo[:, 0] < g.xmin - escape_tol) | (hi[:, 0] > g.xmax + escape_tol)
           | (lo[:, 1] < g.ymin - escape_tol) | (hi[:, 1] > g.ymax + escape_tol))
    if np.any(out):
        k = int(np.nonzero(out)[0][0])
        raise SolidEscapedError(
            f"solid element {first_elem + k} left the fluid box: bounding box "
            f"[{lo[k, 0]:.6g}, {hi[k, 0]:.6g}] x [{lo[k, 1]:.6g}, {hi[k, 1]:.6g}]"
        )
    return lo, hi


def _clip_element(elem, quad, lo, hi, fluid_mesh):
    g = fluid_mesh.grid
    tol = 1e-12 * g.diameter
    min_area = SLIVER_RTOL * g.hx * g.hy
    hx, hy = g.hx, g.hy
    frags = []
    for cell in locate_cells(fluid_mesh, (lo[0], hi[0], lo[1], hi[1])):
        j, i = divmod(int(cell), g.nx)
        x0 = g.xmin + i * hx
        y0 = g.ymin + j * hy
        piece = clip_to_box(quad, x0, x0 + hx, y0, y0 + hy, tol)
        if not piece or _shoelace(piece) < min_area:
            continue
        frags.append(IntersectionFragment(int(elem), int(cell), np.array(piece)))
    return frags


def intersect_element(elem: int, corners, fluid_mesh: Mesh, escape_tol: float | None = None):
    """Fragments of the straight-edged image quad ``corners`` over the fluid cells.

    Candidate cells come from :func:`mesh.locate_cells` on the image bounding
    box.  Pieces smaller than ``1e-14`` times the cell area are dropped.
    """
    corners = np.asarray(corners, dtype=float)
    lo, hi = _image_checks(corners[None], fluid_mesh, escape_tol, first_elem=elem)
    return _clip_element(elem, [tuple(c) for c in corners.tolist()], lo[0], hi[0], fluid_mesh)


def intersect_all(X_points, solid_mesh: Mesh, fluid_mesh: Mesh, escape_tol: float | None = None):
    """Fragments of every solid element, ordered by (solid element, fluid cell)."""
    images = np.asarray(X_points, dtype=float)[solid_mesh.elements]
    lo, hi = _image_checks(images, fluid_mesh, escape_tol)
    frags = []
    quads = images.tolist()
    for e in range(solid_mesh.n_elements):
        frags.extend(_clip_element(e, [tuple(c) for c in quads[e]], lo[e], hi[e], fluid_mesh))
    return frags


def fragment_quadrature(frags, X_points, solid_mesh: Mesh, fluid_mesh: Mesh, degree: int = DEFAULT_DEGREE):
    """Batch quadrature data for ``frags``; also stored on each fragment.

    Returns ``(owner, points, solid_ref, fluid_ref, weights)`` where the
    per-point arrays have shape (T, nq, ...) for T fan triangles and
    ``owner[t]`` is the index of the fragment that triangle ``t`` belongs to.
    The weights include the ``1 / |det grad_s X_h|`` measure conversion.
    """
    rule = triangle_quadrature(degree)
    tris, owner = fan_triangles_batch([f.polygon for f in frags])
    if len(tris) == 0:
        empty = np.zeros((0, len(rule.weights), 2))
        return np.zeros(0, dtype=int), empty, empty, empty, np.zeros((0, len(rule.weights)))
    nq = len(rule.weights)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    lam = rule.points
    pts = a[:, None, :] + lam[None, :, 0, None] * (b - a)[:, None, :] + lam[None, :, 1, None] * (c - a)[:, None, :]
    w = 2.0 * triangle_areas(tris)[:, None] * rule.weights[None, :]

    g = fluid_mesh.grid
    cells = np.array([f.fluid_cell for f in frags])[owner]
    elems = np.array([f.solid_element for f in frags])[owner]
    ci = cells % g.nx
    cj = cells // g.nx
    fluid_ref = np.empty_like(pts)
    fluid_ref[..., 0] = 2.0 * (pts[..., 0] - (g.xmin + ci[:, None] * g.hx)) / g.hx - 1.0
    fluid_ref[..., 1] = 2.0 * (pts[..., 1] - (g.ymin + cj[:, None] * g.hy)) / g.hy - 1.0

    img = np.asarray(X_points, dtype=float)[solid_mesh.elements]
    ref = solid_mesh.element_corners()
    pt_elem = np.repeat(elems, nq)
    xi = inverse_bilinear_batch(img, pts.reshape(-1, 2), owner=pt_elem).reshape(pts.shape)
    det_x = _jacobian_det(img, xi.reshape(-1, 2), pt_elem)
    det_s = _jacobian_det(ref, xi.reshape(-1, 2), pt_elem)
    w = w * (det_s / np.abs(det_x)).reshape(w.shape)

    cuts = np.searchsorted(owner, np.arange(1, len(frags)))
    for f, p, s, r, ww in zip(frags, np.split(pts, cuts), np.split(xi, cuts),
                              np.split(fluid_ref, cuts), np.split(w, cuts)):
        f.points, f.solid_ref, f.fluid_ref, f.weights = p, s, r, ww
    return owner, pts, xi, fluid_ref, w


def _jacobian_det(corners, xi, owner):
    _, b, c, d = bilinear_coefficients(corners)
    b, c, d = b[owner], c[owner], d[owner]
    js = b + d * xi[:, 1:2]
    jt = c + d * xi[:, 0:1]
    return js[:, 0] * jt[:, 1] - jt[:, 0] * js[:, 1]


def assemble_coupling(X, fluid_mesh: Mesh, vdofs: DofMap, solid_mesh: Mesh, sdofs: DofMap,
                      degree: int = DEFAULT_DEGREE, escape_tol: float | None = None,
                      return_fragments: bool = False):
    """``(C_f)_{lj} = int_B chi_l(s) phi_j(X_h(s)) ds`` as a (2 Ns) x (2 Nf) matrix.

    ``X`` is the component-major solid position vector.  The scalar pattern
    is repeated for both velocity components with no cross-component terms.
    """
    X = np.asarray(X, dtype=float)
    ns = sdofs.n_nodes
    X_points = np.column_stack([X[:ns], X[ns:]])
    frags = intersect_all(X_points, solid_mesh, fluid_mesh, escape_tol)
    owner, _, xi, fluid_ref, w = fragment_quadrature(frags, X_points, solid_mesh, fluid_mesh, degree)
    Ns = q1_shape(xi)  # (T, nq, 4)
    Nf = q2_shape(fluid_ref)  # (T, nq, 9)
    local_t = np.matmul((Ns * w[..., None]).transpose(0, 2, 1), Nf)
    nfrag = len(frags)
    local = np.zeros((nfrag, 4, 9))
    np.add.at(local, owner, local_t)
    elems = np.array([f.solid_element for f in frags], dtype=np.int64)
    cells = np.array([f.fluid_cell for f in frags], dtype=np.int64)
    rows = sdofs.cell_nodes[elems] if nfrag else np.zeros((0, 4), dtype=np.int64)
    cols = vdofs.cell_nodes[cells] if nfrag else np.zeros((0, 9), dtype=np.int64)
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    C = sp.coo_matrix((local.ravel(), (r, c)), shape=(ns, vdofs.n_nodes)).tocsr()
    C.sum_duplicates()
    Cf = sp.block_diag([C, C], format="csr")
    Cf.sort_indices()
    if return_fragments:
        return Cf, frags
    return Cf


def write_fragments_csv(frags, path) -> None:
    """One row per fragment: element ids followed by flattened polygon vertices."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["solid_element", "fluid_cell", "n_vertices", "vertices"])
        for f in frags:
            verts = " ".join(f"{x:.17g},{y:.17g}" for x, y in f.polygon)
            w.writerow([f.solid_element, f.fluid_cell, len(f.polygon), verts])
