import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from fdfsi.fem import (
    BcSpec,
    apply_velocity_bcs,
    assemble_fluid_blocks,
    assemble_solid_mass,
    assemble_solid_stiffness_linear,
    assemble_velocity_load,
    fix_pressure_nullspace,
    pressure_mean,
    shift_pressure,
    stokes_operator,
)
from fdfsi.geometry import bilinear_jacobian, q1_shape, q1_shape_grad
from fdfsi.mesh import (
    PRESSURE_P1DC,
    SOLID_Q1,
    VELOCITY_Q2,
    MeshError,
    build_annulus_quarter_mesh,
    build_cartesian_mesh,
    build_dof_maps,
    build_rect_mesh,
)
from stokes_mms import observed_orders


def fluid_setup(n, nu=0.1, rho=1.0, dt=0.01, domain=(0, 1, 0, 1)):
    mesh = build_cartesian_mesh(n, n, domain)
    vd = build_dof_maps(mesh, VELOCITY_Q2)
    pd = build_dof_maps(mesh, PRESSURE_P1DC)
    return mesh, vd, pd, assemble_fluid_blocks(mesh, vd, pd, nu, rho, dt)


# independent dense reference: 1D Lagrange on {-1, 0, 1}, 5-point Gauss per direction
def _lag(t):
    return np.array([t * (t - 1) / 2, 1 - t * t, t * (t + 1) / 2])


def _dlag(t):
    return np.array([t - 0.5, -2 * t, t + 0.5])


def dense_reference(mesh, vd, pd, nu):
    nv, npr = vd.ndofs, pd.ndofs
    M = np.zeros((nv, nv))
    K = np.zeros((nv, nv))
    B = np.zeros((npr, nv))
    g, w = np.polynomial.legendre.leggauss(5)
    for e in range(mesh.n_elements):
        x0, x1, y0, y1 = mesh.grid.cell_box(e)
        hx, hy = x1 - x0, y1 - y0
        xc, yc = (x0 + x1) / 2, (y0 + y1) / 2
        nodes = vd.cell_nodes[e]
        for s, ws in zip(g, w):
            for t, wt in zip(g, w):
                jw = ws * wt * hx * hy / 4
                # local index 3*j + i: i along x, j along y
                phi = np.outer(_lag(t), _lag(s)).ravel()
                dphx = np.outer(_lag(t), _dlag(s)).ravel() * 2 / hx
                dphy = np.outer(_dlag(t), _lag(s)).ravel() * 2 / hy
                px, py = xc + s * hx / 2, yc + t * hy / 2
                psi = np.array([1.0, px - xc, py - yc])
                grads = np.stack([dphx, dphy], axis=1)
                for a in range(9):
                    for c in range(2):
                        I = c * vd.n_nodes + nodes[a]
                        Ga = np.zeros((2, 2))
                        Ga[c] = grads[a]
                        Ea = 0.5 * (Ga + Ga.T)
                        B[pd.cell_dofs[e], I] += jw * psi * grads[a, c]
                        for b in range(9):
                            J = c * vd.n_nodes + nodes[b]
                            M[I, J] += jw * phi[a] * phi[b]
                            for d in range(2):
                                Jd = d * vd.n_nodes + nodes[b]
                                Gb = np.zeros((2, 2))
                                Gb[d] = grads[b]
                                K[I, Jd] += jw * nu * np.sum(Ea * 0.5 * (Gb + Gb.T))
    return M, K, B


def test_fluid_blocks_match_dense_reference():
    mesh, vd, pd, fb = fluid_setup(2, nu=0.3, domain=(0, 1, 0, 0.5))
    M, K, B = dense_reference(mesh, vd, pd, 0.3)
    for got, ref in ((fb.M, M), (fb.K, K), (fb.B, B)):
        assert np.abs(got.toarray() - ref).max() <= 1e-13 * np.abs(ref).max()
    np.testing.assert_allclose(fb.A.toarray(), (1.0 / 0.01) * M + K, rtol=1e-13, atol=1e-13 * np.abs(K).max())


def test_fluid_blocks_structure():
    mesh, vd, pd, fb = fluid_setup(4)
    for m in (fb.M, fb.K, fb.A):
        assert abs(m - m.T).max() == 0.0
    ones = np.ones(vd.n_nodes)
    zero = np.zeros(vd.n_nodes)
    for c in (np.concatenate([ones, zero]), np.concatenate([zero, ones])):
        assert np.abs(fb.K @ c).max() < 1e-13
        assert np.abs(fb.B @ c).max() < 1e-13
        assert c @ fb.M @ c == pytest.approx(1.0, rel=1e-13)
    # rotation is in the kernel of the symmetric-gradient form
    x, y = vd.node_coords.T
    rot = np.concatenate([-y, x])
    assert np.abs(fb.K @ rot).max() < 1e-12
    assert np.linalg.eigvalsh(fb.M.toarray()).min() > 0


@pytest.mark.parametrize("bad", [dict(nu=0.0), dict(rho=-1.0), dict(dt=0.0)])
def test_fluid_blocks_reject_bad_parameters(bad):
    mesh = build_cartesian_mesh(1, 1)
    kw = dict(nu=1.0, rho=1.0, dt=1.0) | bad
    with pytest.raises(ValueError):
        assemble_fluid_blocks(mesh, build_dof_maps(mesh, VELOCITY_Q2), build_dof_maps(mesh, PRESSURE_P1DC), **kw)


def test_inf_sup_bounded_below():
    betas = []
    for n in (2, 4, 8):
        mesh, vd, pd, fb = fluid_setup(n, nu=1.0)
        bcs = BcSpec({t: "noslip" for t in mesh.boundary_edges})
        bcs.resolve(mesh, vd)
        free = bcs.free_mask(vd.ndofs)
        K = fb.K.toarray()[np.ix_(free, free)]
        B = fb.B.toarray()[:, free]
        # P1dc pressure mass, cell by cell on axis-aligned cells
        h = 1.0 / n
        Mp_cell = h * h * np.diag([1.0, h * h / 12, h * h / 12])
        Mp = np.kron(np.eye(mesh.n_elements), Mp_cell)
        S = B @ np.linalg.solve(K, B.T)
        ev = np.sort(sla.eigh(S, Mp, eigvals_only=True))
        assert ev[0] < 1e-10  # constant pressure mode
        betas.append(np.sqrt(ev[1]))
    assert min(betas) > 0.1


def test_noslip_bcs_hold_exactly():
    mesh, vd, pd, fb = fluid_setup(4)
    bcs = BcSpec({t: "noslip" for t in mesh.boundary_edges})
    bcs.resolve(mesh, vd)
    f = assemble_velocity_load(mesh, vd, lambda x, y: (np.sin(3 * y), np.cos(2 * x)))
    A, B, ru, rp = apply_velocity_bcs(fb.A, fb.B, f, np.zeros(pd.ndofs), bcs, vd)
    op, rp = fix_pressure_nullspace(stokes_operator(A, B), rp, vd.ndofs)
    sol = spla.spsolve(op.tocsc(), np.concatenate([ru, rp]))
    assert np.all(sol[bcs.constrained] == 0.0)
    assert np.abs(sol[: vd.ndofs]).max() > 0


def test_slip_constrains_normal_component_only():
    mesh, vd, pd, fb = fluid_setup(2)
    bcs = BcSpec({"left": "slip"})
    dofs = bcs.resolve(mesh, vd)
    left = vd.boundary_nodes(mesh, "left")
    np.testing.assert_array_equal(dofs, np.sort(left))
    assert not np.any(np.isin(left + vd.n_nodes, dofs))
    bottom = BcSpec({"bottom": "slip"}).resolve(mesh, vd)
    np.testing.assert_array_equal(bottom, np.sort(vd.boundary_nodes(mesh, "bottom") + vd.n_nodes))


def test_bcs_keep_free_block_spd_and_symmetric():
    mesh, vd, pd, fb = fluid_setup(2)
    bcs = BcSpec({"left": "slip", "bottom": "slip", "top": "noslip", "right": "noslip"})
    bcs.resolve(mesh, vd)
    A, B, _, _ = apply_velocity_bcs(fb.A, fb.B, np.zeros(vd.ndofs), np.zeros(pd.ndofs), bcs, vd)
    free = bcs.free_mask(vd.ndofs)
    Af = A.toarray()[np.ix_(free, free)]
    assert abs(A - A.T).max() == 0.0
    assert np.linalg.eigvalsh(Af).min() > 0
    assert np.abs(B.toarray()[:, ~free]).max() == 0.0


def test_nonhomogeneous_dirichlet_lifting():
    mesh, vd, pd, fb = fluid_setup(3)
    bcs = BcSpec({t: "noslip" for t in mesh.boundary_edges}, values=lambda x, y: (1.0 + 0 * x, 0 * x))
    bcs.resolve(mesh, vd)
    A, B, ru, rp = apply_velocity_bcs(fb.K, fb.B, np.zeros(vd.ndofs), np.zeros(pd.ndofs), bcs, vd)
    op, rp = fix_pressure_nullspace(stokes_operator(A, B), rp, vd.ndofs)
    sol = spla.spsolve(op.tocsc(), np.concatenate([ru, rp]))
    # uniform translation is the Stokes solution for uniform boundary data
    np.testing.assert_allclose(sol[: vd.n_nodes], 1.0, atol=1e-12)
    np.testing.assert_allclose(sol[vd.n_nodes: vd.ndofs], 0.0, atol=1e-12)


def test_unknown_boundary_tag():
    mesh, vd, _, _ = fluid_setup(1)
    with pytest.raises(MeshError):
        BcSpec({"front": "noslip"}).resolve(mesh, vd)
    with pytest.raises(ValueError):
        BcSpec({"left": "sticky"}).resolve(mesh, vd)


def test_pressure_pin_and_shift():
    mesh, vd, pd, fb = fluid_setup(4)
    bcs = BcSpec({t: "noslip" for t in mesh.boundary_edges})
    bcs.resolve(mesh, vd)
    f = assemble_velocity_load(mesh, vd, lambda x, y: (x * y, np.exp(x)))
    A, B, ru, rp = apply_velocity_bcs(fb.A, fb.B, f, np.zeros(pd.ndofs), bcs, vd)
    op, rp = fix_pressure_nullspace(stokes_operator(A, B), rp, vd.ndofs)
    lu = spla.splu(op.tocsc())
    rhs = np.concatenate([ru, rp])
    sol = lu.solve(rhs)
    assert np.linalg.norm(op @ sol - rhs) <= 1e-10 * np.linalg.norm(rhs)
    p = sol[vd.ndofs:]
    assert p[0] == 0.0
    ps = shift_pressure(mesh, p)
    assert abs(pressure_mean(mesh, ps)) < 1e-12 * np.abs(ps).max()


def test_manufactured_stokes_orders_coarse():
    eu, ep, ou, op = observed_orders([4, 8, 16])
    assert np.all(ou >= 2.7)
    assert np.all(op >= 1.7)


def test_solid_mass_closed_form():
    h = 0.3
    mesh = build_rect_mesh((0, h, 0, h), 1, 1)
    sd = build_dof_maps(mesh, SOLID_Q1)
    loc = mesh.elements[0]
    Cs = assemble_solid_mass(mesh, sd).toarray()[np.ix_(np.r_[loc, loc + 4], np.r_[loc, loc + 4])]
    ref = h * h / 36 * np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]])
    np.testing.assert_allclose(Cs[:4, :4], ref, rtol=1e-14)
    np.testing.assert_allclose(Cs[4:, 4:], ref, rtol=1e-14)
    assert np.abs(Cs[:4, 4:]).max() == 0.0


def test_solid_mass_partition_of_unity_and_spd():
    mesh = build_annulus_quarter_mesh(3, 9)
    sd = build_dof_maps(mesh, SOLID_Q1)
    Cs = assemble_solid_mass(mesh, sd)
    one = np.concatenate([np.ones(sd.n_nodes), np.zeros(sd.n_nodes)])
    assert one @ Cs @ one == pytest.approx(mesh.area(), rel=1e-13)
    assert np.linalg.eigvalsh(Cs.toarray()).min() > 0


def test_solid_stiffness_kernel_scaling_and_energy():
    mesh = build_annulus_quarter_mesh(2, 5)
    sd = build_dof_maps(mesh, SOLID_Q1)
    A1 = assemble_solid_stiffness_linear(mesh, sd, 1.0)
    A10 = assemble_solid_stiffness_linear(mesh, sd, 10.0)
    A10_5 = assemble_solid_stiffness_linear(mesh, sd, 10.0, nquad=5)
    np.testing.assert_allclose(A10.toarray(), 10 * A1.toarray(), rtol=1e-15)
    const = np.concatenate([np.full(sd.n_nodes, 0.7), np.full(sd.n_nodes, -1.2)])
    assert np.abs(A10 @ const).max() < 1e-12
    ev = np.linalg.eigvalsh(A1.toarray())
    assert np.sum(ev < 1e-10) == 2
    # direct quadrature of kappa |grad X_h|^2 with a matching 5-point rule (curved
    # bilinear cells make the integrand rational, so the rules must agree)
    X = np.random.default_rng(0).standard_normal(sd.ndofs)
    g, w = np.polynomial.legendre.leggauss(5)
    pts = np.array([[s, t] for s in g for t in g])
    wts = np.array([a * b for a in w for b in w])
    total = 0.0
    for e, nodes in enumerate(mesh.elements):
        jac, det = bilinear_jacobian(mesh.nodes[nodes], pts)
        dN = q1_shape_grad(pts)  # (nq, 4, 2)
        for q in range(len(pts)):
            grad = dN[q] @ np.linalg.inv(jac[q])
            for c in range(2):
                gx = X[c * sd.n_nodes + nodes] @ grad
                total += wts[q] * det[q] * gx @ gx
    assert X @ A10_5 @ X == pytest.approx(10 * total, rel=1e-12)
    assert X @ A10 @ X == pytest.approx(10 * total, rel=1e-4)
    assert q1_shape(pts).sum(axis=1) == pytest.approx(np.ones(len(pts)))


def test_solid_stiffness_rejects_bad_kappa():
    mesh = build_rect_mesh((0, 1, 0, 1), 1, 1)
    with pytest.raises(ValueError):
        assemble_solid_stiffness_linear(mesh, build_dof_maps(mesh, SOLID_Q1), 0.0)
