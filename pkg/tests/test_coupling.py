import numpy as np
import pytest

from glcoupling.coupling import (
    OMEGA_MAX,
    OMEGA_MIN,
    Stagnation,
    aitken_omega,
    monolithic_reference,
    restrict_to_patch,
    richardson_update,
    run_synchronous,
)

from conftest import make_system


def test_transfer_rows_partition_unity(poisson8):
    for lm in poisson8.locals:
        J = lm.transfer.matrix
        assert np.abs(np.asarray(J.sum(axis=1)).ravel() - 1).max() < 1e-12
        assert J.min() >= -1e-15


def test_transfer_reproduces_linear_fields(poisson8):
    gmesh = poisson8.decomp.global_mesh
    a = np.array([0.3, -1.2, 0.7])
    for lm in poisson8.locals:
        t = lm.transfer
        lin = lambda x: 0.5 + x @ a
        fine = lm.patch.mesh.nodes[t.fine_nodes]
        np.testing.assert_allclose(t.matrix @ lin(gmesh.nodes[t.global_nodes]), lin(fine), atol=1e-14)


def test_conforming_transfer_is_permutation(conforming2):
    for lm in conforming2.locals:
        J = lm.transfer.matrix.toarray()
        assert set(np.unique(J)) <= {0.0, 1.0}
        assert (J.sum(axis=0) == 1).all() and (J.sum(axis=1) == 1).all()


def test_global_solve_load_balance(poisson8):
    # with no p, the global problem is in equilibrium: sum of zone reactions is zero
    u = poisson8.global_solve(np.zeros(poisson8.n_iface))
    total = sum(poisson8.scatter(s, poisson8.zone_reaction(s, u)) for s in range(poisson8.n_patches))
    assert np.abs(total).max() < 1e-12


def test_global_equilibrium_with_complement(partial2d):
    rng = np.random.default_rng(3)
    sysm = partial2d
    p = rng.normal(size=sysm.n_iface) * 1e-2
    u, reactions, _, r = sysm.evaluate(p)
    zones = [sysm.zone_reaction(s, u) for s in range(sysm.n_patches)]
    lam0 = sysm.complement_reaction(u)
    total = lam0 + sum(sysm.scatter(s, z) for s, z in enumerate(zones))
    np.testing.assert_allclose(total, p, atol=1e-12)


def test_paired_residual_full_coverage(poisson8):
    rng = np.random.default_rng(4)
    p = rng.normal(size=poisson8.n_iface) * 1e-2
    u, reactions, _, r = poisson8.evaluate(p)
    zones = [poisson8.zone_reaction(s, u) for s in range(poisson8.n_patches)]
    np.testing.assert_allclose(poisson8.paired_residual(p, reactions, zones), r, atol=1e-12)


def test_homogeneous_patches_need_no_correction():
    s = make_system(2, 2, 0, contrast=1.0, conforming_interfaces=True)
    rep = run_synchronous(s, "fixed", tol=1e-12)
    assert rep.history[0][1] < 1e-12
    assert rep.global_iterations == 1 and rep.converged


def test_monolithic_equivalence_2d():
    s = make_system(2, 1, 0, conforming_interfaces=True)
    rep = run_synchronous(s, "aitken", tol=1e-11)
    ref = monolithic_reference(s)
    for k, u in enumerate(rep.u_local):
        expect = restrict_to_patch(s, k, ref)
        assert np.abs(u - expect).max() <= 1e-9 * np.abs(ref).max()


def test_partial_coverage_converges(partial2d):
    rep = run_synchronous(partial2d, "aitken", tol=1e-9)
    assert rep.converged
    assert rep.history[-1][2] <= 1e-9


def test_nonconforming_interfaces_converge(poisson8):
    fixed = run_synchronous(poisson8, "fixed", omega=1.0, tol=1e-7)
    assert fixed.converged
    # geometric convergence: no residual increase after the first few sweeps
    rel = [h[2] for h in fixed.history]
    assert rel[-1] < rel[len(rel) // 2] < rel[1]


def test_submodeling_is_first_iterate(poisson8):
    sub = run_synchronous(poisson8, "submodeling")
    seen = {}

    def grab(k, p, u_g, fields, r):
        if k == 0:
            seen.update(u=u_g.copy(), fields=[f.copy() for f in fields], r=r.copy())

    run_synchronous(poisson8, "fixed", omega=1.0, max_iterations=3, on_iterate=grab)
    assert sub.global_iterations == 1 and not sub.converged
    assert np.array_equal(sub.u_global, seen["u"])
    for a, b in zip(sub.u_local, seen["fields"]):
        assert np.array_equal(a, b)
    assert sub.history[0][1] == np.linalg.norm(seen["r"]) > 0


def test_richardson_rejects_bad_omega():
    with pytest.raises(ValueError):
        richardson_update(np.zeros(2), np.ones(2), 2.0)
    np.testing.assert_array_equal(richardson_update(np.ones(2), np.ones(2), 0.5), [1.5, 1.5])


@pytest.mark.parametrize("c", [0.5, -1.0, 0.9])
def test_aitken_scalar_geometric(c):
    r0 = np.array([0.7])
    for omega in (1.0, 0.3):
        got = aitken_omega(r0, c * r0, omega, bounds=(-np.inf, np.inf))
        assert got == pytest.approx(omega / (1 - c), rel=1e-12)


def test_aitken_clamps():
    r0 = np.array([1.0, 0.0])
    assert aitken_omega(r0, 0.99 * r0, 1.0) == OMEGA_MAX
    assert aitken_omega(r0, -20 * r0, 1.0) == OMEGA_MIN


def test_aitken_stagnation():
    r = np.array([1.0, 2.0])
    with pytest.raises(Stagnation):
        aitken_omega(r, r.copy(), 1.0)


def test_aitken_beats_fixed_on_heterogeneous_poisson(poisson8):
    fixed = run_synchronous(poisson8, "fixed", omega=1.0)
    ait = run_synchronous(poisson8, "aitken")
    assert ait.converged and fixed.converged
    assert ait.global_iterations <= fixed.global_iterations


def test_sync_deterministic(poisson8):
    a = run_synchronous(poisson8, "aitken")
    b = run_synchronous(poisson8, "aitken")
    assert np.array_equal(a.p, b.p)
    assert [h[:4] for h in a.history] == [h[:4] for h in b.history]
