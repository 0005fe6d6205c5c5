"""Constitutive laws of the immersed solid and assembly of its elastic term.

All law functions broadcast over leading dimensions: ``F`` has shape
``(..., 2, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import _solid_element_data, scatter
from .mesh import DofMap, Mesh

#: exponents above this are treated as a diverged state
EXPONENT_LIMIT = 700.0

LINEAR, EXPONENTIAL = "linear", "exponential"


class SolidModelError(ArithmeticError):
    pass


class InvertedElementError(SolidModelError):
    def __init__(self, element):
        super().__init__(f"solid element {element} is inverted (det F <= 0)")
        self.element = element


@dataclass(frozen=True)
class LinearModel:
    """``P(F) = kappa F``."""

    kappa: float
    kind = LINEAR

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


@dataclass(frozen=True)
class ExponentialModel:
    """``W(F) = gamma / (2 eta) * exp(eta (tr(F^T F) - 2))``."""

    gamma: float
    eta: float
    kind = EXPONENTIAL

    def __post_init__(self):
        if not (self.gamma > 0 and self.eta > 0):
            raise ValueError("gamma and eta must be positive")


def _exp_factor(model, F):
    expo = model.eta * (np.einsum("...ij,...ij->...", F, F) - 2.0)
    if np.any(expo > EXPONENT_LIMIT):
        raise SolidModelError(f"strain energy exponent {np.max(expo):.1f} exceeds {EXPONENT_LIMIT}")
    return np.exp(expo)


def energy(model, F):
    """Strain energy density ``W(F)``."""
    F = np.asarray(F, dtype=float)
    if model.kind == LINEAR:
        return 0.5 * model.kappa * np.einsum("...ij,...ij->...", F, F)
    return model.gamma / (2.0 * model.eta) * _exp_factor(model, F)


def piola_stress(model, F):
    """First Piola-Kirchhoff stress ``dW/dF``."""
    F = np.asarray(F, dtype=float)
    if model.kind == LINEAR:
        return model.kappa * F
    return (model.gamma * _exp_factor(model, F))[..., None, None] * F


_I4 = np.einsum("ac,bd->abcd", np.eye(2), np.eye(2))


def piola_tangent(model, F):
    """``dP_ab / dF_cd`` with shape ``(..., 2, 2, 2, 2)``."""
    F = np.asarray(F, dtype=float)
    if model.kind == LINEAR:
        return np.broadcast_to(model.kappa * _I4, F.shape[:-2] + (2, 2, 2, 2)).copy()
    e = model.gamma * _exp_factor(model, F)
    FF = np.einsum("...ab,...cd->...abcd", F, F)
    return e[..., None, None, None, None] * (_I4 + 2.0 * model.eta * FF)


def deformation_gradients(mesh: Mesh, sdofs: DofMap, X, nquad: int = 3):
    """``F = grad_s X_h`` at the Gauss points: returns (geometry, grads, F)."""
    geo, _, G = _solid_element_data(mesh, nquad)
    X = np.asarray(X, dtype=float)
    n = sdofs.n_nodes
    Xe = np.stack([X[:n][sdofs.cell_nodes], X[n:][sdofs.cell_nodes]], axis=1)  # (ne, 2, 4)
    F = np.einsum("eak,eqkb->eqab", Xe, G)
    return geo, G, F


def _check_orientation(F):
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    bad = np.nonzero((det <= 0.0).any(axis=1))[0]
    if bad.size:
        raise InvertedElementError(int(bad[0]))


def elastic_energy(mesh: Mesh, sdofs: DofMap, model, X) -> float:
    """``E(X) = int_B W(grad_s X_h) ds``."""
    geo, _, F = deformation_gradients(mesh, sdofs, X)
    return float(np.sum(geo.jxw * energy(model, F)))


def assemble_solid_residual_tangent(mesh: Mesh, sdofs: DofMap, model, X, with_tangent: bool = True):
    """Residual ``(P(F_h), grad_s chi_i)_B`` and its exact derivative in ``X``."""
    geo, G, F = deformation_gradients(mesh, sdofs, X)
    _check_orientation(F)
    P = piola_stress(model, F)
    ne = mesh.n_elements
    Re = np.einsum("eq,eqcb,eqkb->eck", geo.jxw, P, G).reshape(ne, 8)
    R = np.zeros(sdofs.ndofs)
    np.add.at(R, sdofs.cell_dofs, Re)
    if not with_tangent:
        return R, None
    D = piola_tangent(model, F)
    Ke = np.einsum("eq,eqkb,eqcbdf,eqlf->eckdl", geo.jxw, G, D, G).reshape(ne, 8, 8)
    n = sdofs.ndofs
    K = scatter(sdofs.cell_dofs, sdofs.cell_dofs, Ke, (n, n))
    return R, K


def identity_coefficients(mesh: Mesh) -> np.ndarray:
    """Coefficients of ``X(s) = s`` (component-major)."""
    return np.concatenate([mesh.nodes[:, 0], mesh.nodes[:, 1]])


def as_points(X) -> np.ndarray:
    """Component-major coefficient vector -> (n, 2) node positions."""
    X = np.asarray(X)
    n = len(X) // 2
    return np.column_stack([X[:n], X[n:]])


def as_coefficients(points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.concatenate([points[:, 0], points[:, 1]])


def solid_stiffness_operator(mesh, sdofs, model) -> sp.csr_matrix | None:
    """Constant stiffness for the linear law (``None`` for nonlinear laws)."""
    if model.kind != LINEAR:
        return None
    from .fem import assemble_solid_stiffness_linear

    return assemble_solid_stiffness_linear(mesh, sdofs, model.kappa)
