import numpy as np
import pytest
import scipy.sparse as sp

from glcoupling import _kernels_py, kernels
from glcoupling.fem import (
    AssemblyError,
    Factorization,
    FactorizationError,
    Physics,
    apply_dirichlet,
    assemble,
    boundary_dofs,
    reaction,
    solve_dirichlet,
)
from glcoupling.mesh import MaterialField, structured_mesh


def unit_mesh(dim, n):
    return structured_mesh((0.0,) * dim, (n,) * dim, 1.0 / n, 1e-9 / n)


def hamming(a, b):
    return bin(a ^ b).count("1")


def test_q1_laplacian_square_closed_form():
    m = unit_mesh(2, 1)
    K = assemble(m, Physics(), MaterialField.homogeneous(m)).stiffness.toarray()
    table = {0: 2 / 3, 1: -1 / 6, 2: -1 / 3}
    expect = np.array([[table[hamming(a, b)] for b in range(4)] for a in range(4)])
    np.testing.assert_allclose(K, expect, atol=1e-15)


def test_q1_laplacian_cube_closed_form():
    m = unit_mesh(3, 1)
    K = assemble(m, Physics(), MaterialField.homogeneous(m)).stiffness.toarray()
    table = {0: 1 / 3, 1: 0.0, 2: -1 / 12, 3: -1 / 12}
    expect = np.array([[table[hamming(a, b)] for b in range(8)] for a in range(8)])
    np.testing.assert_allclose(K, expect, atol=1e-15)


def lame_energy(eps, nu, E=1.0):
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam * np.trace(eps) ** 2 + 2 * mu * np.sum(eps * eps)


@pytest.mark.parametrize("dim", [2, 3])
def test_elasticity_energy_of_uniform_strain(dim):
    rng = np.random.default_rng(dim)
    m = structured_mesh((0.0,) * dim, (2,) * dim, 0.5, 1e-9)
    nu = 0.3
    prob = assemble(m, Physics("elasticity", nu), MaterialField.homogeneous(m))
    grad = rng.normal(size=(dim, dim))
    eps = 0.5 * (grad + grad.T)
    u = (m.nodes @ grad.T).ravel()
    # plane strain in 2D: the out-of-plane strain is zero so the 3D formula holds
    assert u @ prob.stiffness @ u == pytest.approx(lame_energy(eps, nu), rel=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_elasticity_rigid_modes_in_kernel(dim):
    m = unit_mesh(dim, 1)
    K = assemble(m, Physics("elasticity"), MaterialField.homogeneous(m)).stiffness.toarray()
    ev = np.linalg.eigvalsh(K)
    n_rigid = 3 if dim == 2 else 6
    assert np.sum(np.abs(ev) < 1e-12) == n_rigid
    assert ev.min() > -1e-12


@pytest.mark.parametrize("kind", ["poisson", "elasticity"])
def test_element_rows_sum_to_zero(kind):
    m = unit_mesh(3, 2)
    K = assemble(m, Physics(kind), MaterialField.homogeneous(m, 3.0)).stiffness
    dpn = 1 if kind == "poisson" else 3
    for c in range(dpn):
        t = np.zeros(K.shape[0])
        t[c::dpn] = 1.0
        assert np.abs(K @ t).max() < 1e-13


def test_stiffness_exactly_symmetric():
    m = unit_mesh(3, 3)
    rng = np.random.default_rng(0)
    mat = MaterialField(rng.uniform(0.01, 1, m.n_elements), 1.0, 0.01, np.zeros(3), 0.0)
    K = assemble(m, Physics("elasticity"), mat).stiffness
    assert (K != K.T).nnz == 0


@pytest.mark.parametrize("dim", [2, 3])
def test_reaction_sum_is_minus_volume(dim):
    m = structured_mesh((0.0,) * dim, (4, 3, 2)[:dim], 0.25, 0.25e-9)
    prob = assemble(m, Physics(), MaterialField.homogeneous(m))
    bnd = boundary_dofs(m, Physics())
    u = solve_dirichlet(prob, (bnd, 0.0))
    vol = float(np.prod(np.array((4, 3, 2)[:dim]) * 0.25))
    assert reaction(prob, u, bnd).sum() == pytest.approx(-vol, rel=1e-12)


def test_h_convergence_against_manufactured_solution():
    # -u'' = 1 with u = x(1-x)/2; measured at element centroids where Q1 is not exact
    errs = []
    for n in (4, 8, 16):
        m = unit_mesh(2, n)
        prob = assemble(m, Physics(), MaterialField.homogeneous(m))
        exact = lambda x: 0.5 * x[:, 0] * (1 - x[:, 0])
        bnd = boundary_dofs(m, Physics())
        u = solve_dirichlet(prob, (bnd, exact(m.nodes[bnd])))
        uc = u[m.elements].mean(axis=1)
        errs.append(np.abs(uc - exact(m.centroids())).max())
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(rates, 2.0, atol=0.05)


def test_subset_assembly_is_additive():
    m = unit_mesh(3, 2)
    phys, mat = Physics("elasticity"), MaterialField.homogeneous(m)
    full = assemble(m, phys, mat)
    a = assemble(m, phys, mat, np.arange(0, 5))
    b = assemble(m, phys, mat, np.arange(5, 8))
    assert abs(full.stiffness - a.stiffness - b.stiffness).max() < 1e-14
    np.testing.assert_allclose(full.load, a.load + b.load, atol=1e-15)


def test_inverted_element_rejected():
    m = unit_mesh(2, 1)
    m.nodes[[0, 1]] = m.nodes[[1, 0]]
    with pytest.raises(AssemblyError, match="element 0"):
        assemble(m, Physics(), MaterialField.homogeneous(m))


def test_dirichlet_conflict_rejected():
    m = unit_mesh(2, 1)
    prob = assemble(m, Physics(), MaterialField.homogeneous(m))
    with pytest.raises(ValueError, match="dof 0"):
        apply_dirichlet(prob, ([0, 0], [1.0, 2.0]))
    red = apply_dirichlet(prob, ([0, 0, 1], [1.0, 1.0, 0.0]))
    assert red.constrained.tolist() == [0, 1]


def test_singular_operator_named():
    m = unit_mesh(2, 2)
    K = assemble(m, Physics(), MaterialField.homogeneous(m)).stiffness
    with pytest.raises(FactorizationError, match="dof"):
        Factorization(K)


def test_factorization_reuse_and_cg_agree():
    m = unit_mesh(3, 4)
    prob = assemble(m, Physics(), MaterialField.homogeneous(m))
    red = apply_dirichlet(prob, (boundary_dofs(m, Physics()), 0.0))
    direct, cg = Factorization(red.K_ff), Factorization(red.K_ff, "cg")
    rng = np.random.default_rng(1)
    for _ in range(3):
        b = rng.normal(size=red.free.size)
        x = direct.solve(b)
        assert np.linalg.norm(red.K_ff @ x - b) < 1e-12 * np.linalg.norm(b)
        np.testing.assert_allclose(cg.solve(b), x, rtol=1e-8, atol=1e-10)


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernel not built")
@pytest.mark.parametrize("kind", [kernels.POISSON, kernels.ELASTICITY])
@pytest.mark.parametrize("dim", [2, 3])
def test_compiled_kernel_matches_python(kind, dim):
    from glcoupling import _kernels

    rng = np.random.default_rng(7)
    m = structured_mesh((0.0,) * dim, (2,) * dim, 0.5, 1e-9)
    X = m.nodes[m.elements] + rng.uniform(-0.05, 0.05, (m.n_elements, 2**dim, dim))
    coef = rng.uniform(0.1, 2, m.n_elements)
    Kc, dc = _kernels.element_matrices(X, coef, kind, 0.25)
    Kp, dp = _kernels_py.element_matrices(X, coef, kind, 0.25)
    np.testing.assert_allclose(Kc, Kp, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(dc, dp, rtol=1e-13)


def test_indefinite_operator_names_pivot():
    K = sp.diags(np.arange(1.0, 9.0)).tolil()
    K[5, 5] = -7.0
    with pytest.raises(FactorizationError, match="dof 5"):
        Factorization(K.tocsc())


def test_one_dof_system():
    f = Factorization(sp.csc_matrix([[4.0]]))
    assert f.solve(np.array([2.0]))[0] == 0.5


def test_unit_bar_nodal_values():
    # 8x1x1 bar, ends fixed, lateral faces free: the 1D solution x(1-x)/2
    m = structured_mesh((0.0, 0.0, 0.0), (8, 1, 1), 0.125, 1e-10)
    prob = assemble(m, Physics(), MaterialField.homogeneous(m))
    x = m.nodes[:, 0]
    ends = np.flatnonzero((x < 1e-12) | (x > 1 - 1e-12))
    u = solve_dirichlet(prob, (ends, 0.0))
    np.testing.assert_allclose(u, 0.5 * x * (1 - x), atol=1e-12)


def test_linear_interpolant_reproduced_on_one_cube():
    m = unit_mesh(3, 1)
    prob = assemble(m, Physics(), MaterialField.homogeneous(m))
    prob.load[:] = 0.0
    x = m.nodes[:, 0]
    ends = np.flatnonzero((x == 0) | (x == 1))
    u = solve_dirichlet(prob, (ends, x[ends]))
    np.testing.assert_allclose(u, x, atol=1e-14)


def test_inclusion_elasticity_stays_spd():
    m = unit_mesh(3, 4)
    from glcoupling.mesh import tag_inclusion

    mat = tag_inclusion(m, (0.5, 0.5, 0.5), 0.25, 1.0, 0.01)
    prob = assemble(m, Physics("elasticity"), mat)
    red = apply_dirichlet(prob, (boundary_dofs(m, Physics("elasticity")), 0.0))
    Factorization(red.K_ff)


def test_pure_backend_selected_by_environment():
    import os
    import subprocess
    import sys

    env = dict(os.environ, GLCOUPLING_PURE="1")
    out = subprocess.run([sys.executable, "-c", "import glcoupling.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
