import numpy as np
import pytest
import scipy.sparse as sp

from fdfsi.fem import (
    BcSpec,
    apply_velocity_bcs,
    assemble_fluid_blocks,
    assemble_solid_mass,
    assemble_solid_stiffness_linear,
    fix_pressure_nullspace,
    stokes_operator,
)
from fdfsi.mesh import PRESSURE_P1DC, SOLID_Q1, VELOCITY_Q2, build_cartesian_mesh, build_dof_maps, build_rect_mesh
from fdfsi.saddle import (
    BLOCK_DIAG,
    BLOCK_TRI,
    BlockPreconditioner,
    BlockSystem,
    GMRESError,
    NewtonError,
    SingularBlockError,
    build_block_system,
    factorize_block,
    gmres,
    newton_solve,
    precond_apply,
)


def random_sparse(n, m, density, rng):
    return sp.random(n, m, density=density, random_state=rng, format="csr")


def toy_blocks(rng, n1=5, n2=3):
    A11 = sp.csr_matrix(np.eye(n1) * 4 + rng.standard_normal((n1, n1)))
    A22 = sp.csr_matrix(np.eye(n2) * 3 + rng.standard_normal((n2, n2)))
    A12 = sp.csr_matrix(rng.standard_normal((n1, n2)))
    A21 = sp.csr_matrix(rng.standard_normal((n2, n1)))
    return A11, A12, A21, A22


def test_block_matvec_matches_monolithic():
    rng = np.random.default_rng(0)
    n1, n2 = 60, 40
    A11 = random_sparse(n1, n1, 0.1, rng) + sp.eye(n1)
    A22 = random_sparse(n2, n2, 0.1, rng) + sp.eye(n2)
    sys_ = BlockSystem(A11.tocsr(), random_sparse(n1, n2, 0.1, rng), random_sparse(n2, n1, 0.1, rng),
                       A22.tocsr(), np.zeros(n1), np.zeros(n2))
    mono = sys_.monolithic()
    for _ in range(5):
        x = rng.standard_normal(n1 + n2)
        a, b = sys_.block_matvec(x), mono @ x
        assert np.linalg.norm(a - b) <= 1e-14 * np.linalg.norm(b)


def test_block_system_shape_checks():
    rng = np.random.default_rng(1)
    A11, A12, A21, A22 = toy_blocks(rng)
    with pytest.raises(ValueError):
        BlockSystem(A11, A12, A21.T, A22, np.zeros(5), np.zeros(3))
    with pytest.raises(ValueError):
        BlockSystem(A11, A12, A21, A22, np.zeros(4), np.zeros(3))


def coupled_toy(dt=0.01):
    fm = build_cartesian_mesh(2, 2)
    vd, pd = build_dof_maps(fm, VELOCITY_Q2), build_dof_maps(fm, PRESSURE_P1DC)
    fb = assemble_fluid_blocks(fm, vd, pd, 0.1, 1.0, dt)
    bcs = BcSpec({t: "noslip" for t in fm.boundary_edges})
    bcs.resolve(fm, vd)
    A, B, _, _ = apply_velocity_bcs(fb.A, fb.B, np.zeros(vd.ndofs), np.zeros(pd.ndofs), bcs, vd)
    A11, _ = fix_pressure_nullspace(stokes_operator(A, B), np.zeros(pd.ndofs), vd.ndofs)
    sm = build_rect_mesh((0.3, 0.7, 0.3, 0.6), 2, 2)
    sd = build_dof_maps(sm, SOLID_Q1)
    Cs = assemble_solid_mass(sm, sd)
    As = assemble_solid_stiffness_linear(sm, sd, 10.0)
    return fm, vd, pd, sm, sd, A11, As, Cs, bcs


def test_zero_coupling_decouples():
    fm, vd, pd, sm, sd, A11, As, Cs, _ = coupled_toy()
    Cf = sp.csr_matrix((sd.ndofs, vd.ndofs))
    X0 = np.zeros(sd.ndofs)
    system = build_block_system(A11, Cf, As, Cs, 0.01, np.zeros(vd.ndofs), -(1 / 0.01) * (Cs @ X0), pd.ndofs)
    assert np.all(system.rhs2 == 0.0)
    F11 = factorize_block(A11, "A11")
    F22 = factorize_block(system.A22, "A22")
    x, its = gmres(system, system.rhs, BlockPreconditioner(BLOCK_TRI, F11, F22, system.A21))
    assert its == 0 and np.all(x == 0.0)


def test_build_block_system_dimension_mismatch():
    fm, vd, pd, sm, sd, A11, As, Cs, _ = coupled_toy()
    with pytest.raises(ValueError):
        build_block_system(A11, sp.csr_matrix((sd.ndofs, vd.ndofs + 1)), As, Cs, 0.01,
                           np.zeros(vd.ndofs), np.zeros(sd.ndofs), pd.ndofs)


def test_gmres_identity_one_iteration():
    b = np.arange(1.0, 11.0)
    x, its = gmres(sp.eye(10, format="csr"), b)
    assert its == 1
    np.testing.assert_allclose(x, b, rtol=1e-14)


def test_gmres_spd_matches_direct():
    rng = np.random.default_rng(2)
    Q = rng.standard_normal((50, 50))
    A = Q @ Q.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x, its = gmres(A, b, tol=1e-10)
    ref = np.linalg.solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-7 * np.linalg.norm(ref)
    assert np.linalg.norm(b - A @ x) <= 1e-10 * np.linalg.norm(b)


def test_gmres_restart_and_failure():
    rng = np.random.default_rng(3)
    A = np.diag(np.linspace(1, 100, 80)) + 0.1 * rng.standard_normal((80, 80))
    b = rng.standard_normal(80)
    x, its = gmres(A, b, tol=1e-9, restart=5, maxit=5000)
    assert np.linalg.norm(b - A @ x) <= 1e-9 * np.linalg.norm(b)
    with pytest.raises(GMRESError) as err:
        gmres(A, b, tol=1e-12, restart=3, maxit=6)
    assert err.value.its == 6
    assert err.value.residual > 1e-12
    assert err.value.x.shape == b.shape


def test_exact_block_tri_preconditioner_one_iteration():
    rng = np.random.default_rng(4)
    A11, _, A21, A22 = toy_blocks(rng)
    A12 = sp.csr_matrix((5, 3))
    system = BlockSystem(A11, A12, A21, A22, rng.standard_normal(5), rng.standard_normal(3))
    P = BlockPreconditioner(BLOCK_TRI, factorize_block(A11), factorize_block(A22), A21)
    x, its = gmres(system, system.rhs, P)
    assert its == 1
    np.testing.assert_allclose(system.monolithic() @ x, system.rhs, atol=1e-13)


def test_preconditioners_agree_without_a21():
    rng = np.random.default_rng(5)
    A11, _, _, A22 = toy_blocks(rng)
    F11, F22 = factorize_block(A11), factorize_block(A22)
    r = rng.standard_normal(8)
    zero = sp.csr_matrix((3, 5))
    np.testing.assert_array_equal(precond_apply(BLOCK_DIAG, F11, F22, zero, r),
                                  precond_apply(BLOCK_TRI, F11, F22, zero, r))


def test_preconditioners_match_dense_inverse():
    rng = np.random.default_rng(6)
    A11, _, A21, A22 = toy_blocks(rng, 5, 3)
    F11, F22 = factorize_block(A11), factorize_block(A22)
    r = rng.standard_normal(8)
    D = np.zeros((8, 8))
    D[:5, :5] = A11.toarray()
    D[5:, 5:] = A22.toarray()
    L = D.copy()
    L[5:, :5] = A21.toarray()
    np.testing.assert_allclose(precond_apply(BLOCK_DIAG, F11, F22, A21, r), np.linalg.solve(D, r), rtol=1e-12)
    np.testing.assert_allclose(precond_apply(BLOCK_TRI, F11, F22, A21, r), np.linalg.solve(L, r), rtol=1e-12)


def test_unknown_preconditioner():
    F = factorize_block(sp.eye(2, format="csr"))
    with pytest.raises(ValueError):
        BlockPreconditioner("ilu", F, F)


def test_factor_identity_and_dense_oracle():
    F = factorize_block(sp.eye(6, format="csr"), "I")
    b = np.arange(6.0)
    np.testing.assert_array_equal(F.solve(b), b)
    fm = build_cartesian_mesh(4, 4)
    vd, pd = build_dof_maps(fm, VELOCITY_Q2), build_dof_maps(fm, PRESSURE_P1DC)
    fb = assemble_fluid_blocks(fm, vd, pd, 0.1, 1.0, 0.01)
    bcs = BcSpec({t: "noslip" for t in fm.boundary_edges})
    bcs.resolve(fm, vd)
    A, B, _, _ = apply_velocity_bcs(fb.A, fb.B, np.zeros(vd.ndofs), np.zeros(pd.ndofs), bcs, vd)
    A11, _ = fix_pressure_nullspace(stokes_operator(A, B), np.zeros(pd.ndofs), vd.ndofs)
    rhs = np.random.default_rng(7).standard_normal(A11.shape[0])
    ref = np.linalg.solve(A11.toarray(), rhs)
    x = factorize_block(A11, "A11").solve(rhs)
    assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)


def test_singular_block_is_named():
    M = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularBlockError, match="A22"):
        factorize_block(M, "A22")
    with pytest.raises(SingularBlockError, match="A11"):
        factorize_block(sp.csr_matrix((3, 2)), "A11")


def test_checksum_tracks_matrix_changes():
    rng = np.random.default_rng(8)
    A11, _, _, A22 = toy_blocks(rng)
    a = factorize_block(A11).checksum()
    assert factorize_block(A11.copy()).checksum() == a
    assert factorize_block(A11 + sp.eye(5) * 1e-3).checksum() != a


class _LinearProblem:
    """Affine residual ``K x - f`` through the Newton driver."""

    def __init__(self, system):
        self.system = system
        self.F11 = factorize_block(system.A11, "A11")

    def residual(self, x):
        return self.system.matvec(x) - self.system.rhs

    def jacobian(self, x):
        return self.system


def linear_problem(force=1.0):
    fm, vd, pd, sm, sd, A11, As, Cs, bcs = coupled_toy()
    from fdfsi.coupling import assemble_coupling
    from fdfsi.solid import identity_coefficients

    X0 = identity_coefficients(sm)
    Cf = assemble_coupling(X0, fm, vd, sm, sd)
    Cf = Cf @ sp.diags(bcs.free_mask(vd.ndofs).astype(float))
    f = np.zeros(sd.ndofs)
    f[sd.n_nodes:] = -force
    g2 = -(1 / 0.01) * (Cs @ X0)
    system = build_block_system(A11, Cf, As, Cs, 0.01, np.zeros(vd.ndofs), g2, pd.ndofs, solid_force=f + As @ X0)
    x0 = np.concatenate([np.zeros(A11.shape[0]), X0, np.zeros(sd.ndofs)])
    return _LinearProblem(system), x0


@pytest.mark.parametrize("kind", [BLOCK_DIAG, BLOCK_TRI])
def test_newton_on_linear_problem_takes_one_step(kind):
    problem, x0 = linear_problem()
    res = newton_solve(problem, x0, kind)
    assert res.nit == 1
    assert len(res.its) == 1
    assert res.history[-1] <= 1e-6 * res.history[0]


def test_newton_at_rest_does_nothing():
    problem, x0 = linear_problem(force=0.0)
    res = newton_solve(problem, x0)
    assert res.nit == 0
    np.testing.assert_array_equal(res.x, x0)


def test_newton_failure_carries_history():
    problem, x0 = linear_problem()
    with pytest.raises(NewtonError) as err:
        newton_solve(problem, x0, tol=1e-30, maxit=2, atol=0.0)
    assert len(err.value.history) == 3


def test_both_preconditioners_same_solution():
    problem, x0 = linear_problem()
    a = newton_solve(problem, x0, BLOCK_DIAG)
    b = newton_solve(problem, x0, BLOCK_TRI)
    assert np.linalg.norm(a.x - b.x) <= 1e-6 * np.linalg.norm(b.x)
    assert a.its[0] >= b.its[0]
