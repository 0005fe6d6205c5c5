"""Computational-geometry kernels for the non-matching coupling.

Polygons are plain ``(n, 2)`` float arrays with counter-clockwise vertex
order; the empty polygon is an array of shape ``(0, 2)``.  Quadrilateral
elements use the reference square ``[-1, 1]^2`` with corners ordered
``(-1,-1), (1,-1), (1,1), (-1,1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

#: relative tolerance (times a length scale) used by the clipping kernels
CLIP_RTOL = 1e-12

REF_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

EMPTY = np.zeros((0, 2))


class GeometryError(ValueError):
    """Raised on degenerate or unsupported geometric input."""


class InversionError(GeometryError):
    """Newton inversion of a bilinear map did not converge."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def as_polygon(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        return EMPTY.copy()
    if p.ndim != 2 or p.shape[1] != 2:
        raise GeometryError(f"polygon must have shape (n, 2), got {p.shape}")
    return p


def polygon_area(p) -> float:
    """Signed shoelace area; positive for counter-clockwise input."""
    p = as_polygon(p)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_diameter(p) -> float:
    p = as_polygon(p)
    if len(p) == 0:
        return 0.0
    ext = p.max(axis=0) - p.min(axis=0)
    return float(np.hypot(ext[0], ext[1]))


def _cleanup(pts, tol):
    """Drop vertices that duplicate a neighbour or lie on the chord of their neighbours."""
    pts = [np.asarray(v, dtype=float) for v in pts]
    removed = True
    while removed and len(pts) >= 3:
        removed = False
        n = len(pts)
        for i in range(n):
            a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
            ab = b - a
            ac = c - a
            lac = np.hypot(ac[0], ac[1])
            if np.hypot(ab[0], ab[1]) <= tol:
                dist = 0.0
            elif lac <= tol:
                dist = np.inf
            else:
                dist = abs(ac[0] * ab[1] - ac[1] * ab[0]) / lac
            if dist <= tol:
                del pts[i]
                removed = True
                break
    if len(pts) < 3:
        return EMPTY.copy()
    return np.array(pts)


def clip_polygon(subject, clip, tol: float | None = None) -> np.ndarray:
    """Clip ``subject`` against the convex counter-clockwise polygon ``clip``.

    Sutherland-Hodgman: the subject is cut successively by the half-plane of
    each clip edge.  A point counts as inside a half-plane when its signed
    distance is at least ``-tol``; ``tol`` defaults to ``CLIP_RTOL`` times the
    diameter of the combined bounding box.  Returns the empty polygon when
    the intersection has no area.
    """
    subject = as_polygon(subject)
    clip = as_polygon(clip)
    if len(clip) < 3 or polygon_area(clip) <= 0.0:
        raise GeometryError("clip polygon is degenerate or not counter-clockwise")
    if len(subject) < 3:
        return EMPTY.copy()
    if tol is None:
        both = np.vstack([subject, clip])
        tol = CLIP_RTOL * polygon_diameter(both)
    ctol = tol * polygon_diameter(clip)

    output = [np.asarray(v) for v in subject]
    m = len(clip)
    for k in range(m):
        if not output:
            break
        a = clip[k]
        e = clip[(k + 1) % m] - a
        le = np.hypot(e[0], e[1])
        if le <= ctol:
            continue
        nrm = np.array([-e[1], e[0]]) / le  # inward normal for CCW clip
        inp = output
        output = []
        s = inp[-1]
        ds = float(np.dot(s - a, nrm))
        for v in inp:
            dv = float(np.dot(v - a, nrm))
            if dv >= -tol:
                if ds < -tol:
                    output.append(s + (ds / (ds - dv)) * (v - s))
                output.append(v)
            elif ds >= -tol:
                if ds > tol:
                    output.append(s + (ds / (ds - dv)) * (v - s))
            s, ds = v, dv
    if len(output) < 3:
        return EMPTY.copy()
    result = _cleanup(output, tol)
    if len(result) and polygon_area(result) <= tol * tol:
        return EMPTY.copy()
    return result


def box_polygon(xmin, xmax, ymin, ymax) -> np.ndarray:
    return np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]], dtype=float)


def triangulate_fan(p) -> np.ndarray:
    """Fan triangulation about the vertex centroid.

    Returns an array of shape ``(n, 3, 2)``; empty for fewer than 3 vertices.
    Raises :class:`GeometryError` if the polygon is not star-shaped about its
    vertex centroid (some fan triangle has negative orientation).
    """
    p = as_polygon(p)
    n = len(p)
    if n < 3:
        return np.zeros((0, 3, 2))
    c = p.mean(axis=0)
    nxt = np.roll(p, -1, axis=0)
    tris = np.empty((n, 3, 2))
    tris[:, 0] = c
    tris[:, 1] = p
    tris[:, 2] = nxt
    areas = triangle_areas(tris)
    scale = max(abs(polygon_area(p)), polygon_diameter(p) ** 2)
    if np.any(areas < -1e-12 * scale):
        raise GeometryError("polygon is not star-shaped about its vertex centroid")
    return tris


def triangle_areas(tris) -> np.ndarray:
    """Signed areas of an ``(m, 3, 2)`` stack of triangles."""
    a = tris[:, 1] - tris[:, 0]
    b = tris[:, 2] - tris[:, 0]
    return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference cell.

    For triangle rules the points are Cartesian coordinates on the reference
    triangle ``(0,0), (1,0), (0,1)`` and the weights sum to 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> QuadratureRule:
    """Collapsed (Duffy) Gauss-Jacobi rule exact up to ``degree`` on the triangle."""
    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= 10:
        raise ValueError(f"unsupported triangle quadrature degree {degree!r}; expected 1..10")
    n = int(ceil((degree + 1) / 2))
    # x direction carries the collapse factor (1 - x): Gauss-Jacobi alpha=1
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    tl, wl = leggauss(n)
    x = (1.0 + tj) / 2.0
    eta = (1.0 + tl) / 2.0
    X, E = np.meshgrid(x, eta, indexing="ij")
    W = np.outer(wj / 4.0, wl / 2.0)
    pts = np.column_stack([X.ravel(), (E * (1.0 - X)).ravel()])
    w = W.ravel()
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, int(degree))


@lru_cache(maxsize=None)
def gauss_square(n: int) -> QuadratureRule:
    """Tensor Gauss-Legendre rule with ``n`` points per direction on [-1,1]^2."""
    t, w = leggauss(n)
    X, Y = np.meshgrid(t, t, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    ww = np.outer(w, w).ravel()
    pts.setflags(write=False)
    ww.setflags(write=False)
    return QuadratureRule(pts, ww, 2 * n - 1)


def q1_shape(xi) -> np.ndarray:
    """Bilinear shape functions at reference points ``xi`` (..., 2) -> (..., 4)."""
    xi = np.asarray(xi, dtype=float)
    s, t = xi[..., 0], xi[..., 1]
    return 0.25 * np.stack(
        [(1 - s) * (1 - t), (1 + s) * (1 - t), (1 + s) * (1 + t), (1 - s) * (1 + t)], axis=-1
    )


def q1_shape_grad(xi) -> np.ndarray:
    """Reference gradients (..., 4, 2) of the bilinear shape functions."""
    xi = np.asarray(xi, dtype=float)
    s, t = xi[..., 0], xi[..., 1]
    ds = 0.25 * np.stack([-(1 - t), (1 - t), (1 + t), -(1 + t)], axis=-1)
    dt = 0.25 * np.stack([-(1 - s), -(1 + s), (1 + s), (1 - s)], axis=-1)
    return np.stack([ds, dt], axis=-1)


@dataclass(frozen=True)
class BilinearMap:
    """Bilinear map of the reference square onto a quadrilateral."""

    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=float)
        if c.shape != (4, 2):
            raise GeometryError(f"bilinear map needs 4 corners, got shape {c.shape}")
        object.__setattr__(self, "corners", c)

    def is_valid(self) -> bool:
        return bool(np.all(bilinear_jacobian(self, REF_CORNERS)[1] > 0.0))


def _corners(m) -> np.ndarray:
    return m.corners if isinstance(m, BilinearMap) else np.asarray(m, dtype=float)


def bilinear_eval(m, xi) -> np.ndarray:
    """Image of reference point(s) ``xi`` under the bilinear map ``m``."""
    return q1_shape(xi) @ _corners(m)


def bilinear_jacobian(m, xi):
    """Jacobian matrix ``d x / d xi`` (..., 2, 2) and its determinant."""
    c = _corners(m)
    dN = q1_shape_grad(xi)  # (..., 4, 2)
    jac = np.einsum("...ai,...aj->...ij", c, dN)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return jac, det


def inverse_bilinear(m, x, maxit: int = 50) -> np.ndarray:
    """Reference coordinates of physical point ``x`` (Newton from the centre)."""
    c = _corners(m)
    xi = inverse_bilinear_batch(c[None], np.asarray(x, dtype=float)[None], maxit=maxit)
    return xi[0]


def bilinear_coefficients(corners):
    """Monomial form ``x = a + b s + c t + d s t`` of bilinear maps (..., 4, 2)."""
    c0, c1, c2, c3 = (corners[..., k, :] for k in range(4))
    a = 0.25 * (c0 + c1 + c2 + c3)
    b = 0.25 * (-c0 + c1 + c2 - c3)
    c = 0.25 * (-c0 - c1 + c2 + c3)
    d = 0.25 * (c0 - c1 + c2 - c3)
    return a, b, c, d


def inverse_bilinear_batch(corners, x, owner=None, maxit: int = 50, rtol: float = 1e-12) -> np.ndarray:
    """Vectorised Newton inversion.

    ``corners`` has shape (m, 4, 2) and ``x`` shape (k, 2).  Point ``i`` is
    pulled back through the map ``corners[owner[i]]`` (``owner`` defaults to
    the identity, so then k == m).  Raises :class:`InversionError` unless
    every residual is below ``rtol`` times the element diameter.
    """
    corners = np.asarray(corners, dtype=float)
    x = np.asarray(x, dtype=float)
    diam = np.hypot(*(corners.max(axis=1) - corners.min(axis=1)).T)
    a, b, c, d = bilinear_coefficients(corners)
    if owner is not None:
        a, b, c, d, diam = a[owner], b[owner], c[owner], d[owner], diam[owner]
    xi = np.zeros_like(x)
    idx = np.arange(len(x))
    for _ in range(maxit):
        if idx.size == 0:
            break
        s, t = xi[idx, 0:1], xi[idx, 1:2]
        bi, ci, di = b[idx], c[idx], d[idx]
        r = a[idx] + bi * s + ci * t + di * s * t - x[idx]
        js = bi + di * t  # d x / d s
        jt = ci + di * s  # d x / d t
        det = js[:, 0] * jt[:, 1] - jt[:, 0] * js[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = (jt[:, 1] * r[:, 0] - jt[:, 0] * r[:, 1]) / det
            dt = (-js[:, 1] * r[:, 0] + js[:, 0] * r[:, 1]) / det
        # singular Jacobian: stop iterating this point, it is reported below
        stuck = ~(np.isfinite(ds) & np.isfinite(dt))
        ds[stuck] = 0.0
        dt[stuck] = 0.0
        res = np.hypot(r[:, 0], r[:, 1])
        done = res <= 1e-2 * rtol * diam[idx]
        step = np.hypot(ds, dt)
        upd = ~done
        xi[idx[upd], 0] -= ds[upd]
        xi[idx[upd], 1] -= dt[upd]
        idx = idx[upd & (step > 1e-15) & ~stuck]
    s, t = xi[:, 0:1], xi[:, 1:2]
    r = a + b * s + c * t + d * s * t - x
    res = np.hypot(r[:, 0], r[:, 1])
    res[~np.isfinite(res)] = np.inf
    bad = ~(res <= rtol * diam)
    if np.any(bad):
        worst = float(np.max(res[bad] / diam[bad]))
        raise InversionError(
            f"bilinear inversion failed for {int(bad.sum())} point(s) in {maxit} iterations "
            f"(relative residual {worst:.3e})",
            residual=worst,
        )
    return xi


def fan_triangles_batch(polygons):
    """Fan triangulation of many polygons at once.

    Returns ``(triangles (T, 3, 2), owner (T,))``.  Same star-shape check as
    :func:`triangulate_fan`.
    """
    counts = np.array([len(p) for p in polygons], dtype=np.int64)
    if counts.size == 0 or counts.sum() == 0:
        return np.zeros((0, 3, 2)), np.zeros(0, dtype=np.int64)
    if np.any(counts < 3):
        raise GeometryError("fan triangulation needs at least 3 vertices per polygon")
    V = np.concatenate(polygons)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    owner = np.repeat(np.arange(len(counts)), counts)
    cent = np.add.reduceat(V, offsets, axis=0) / counts[:, None]
    nxt = np.arange(len(V)) + 1
    last = offsets + counts - 1
    nxt[last] = offsets
    tris = np.stack([cent[owner], V, V[nxt]], axis=1)
    areas = triangle_areas(tris)
    ext = np.maximum.reduceat(V, offsets, axis=0) - np.minimum.reduceat(V, offsets, axis=0)
    scale = (ext ** 2).sum(axis=1)
    if np.any(areas < -1e-12 * scale[owner]):
        raise GeometryError("polygon is not star-shaped about its vertex centroid")
    return tris, owner
