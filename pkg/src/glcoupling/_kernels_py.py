"""Vectorized numpy element kernels (fallback for the compiled ``_kernels``)."""

import numpy as np

POISSON = 0
ELASTICITY = 1

_GP = 1.0 / np.sqrt(3.0)


def reference_rule(dim):
    """2-point Gauss rule per axis on [-1, 1]^dim: points, shape values, gradients."""
    n = 2**dim
    pts = np.array([[(-_GP, _GP)[(q >> d) & 1] for d in range(dim)] for q in range(n)])
    signs = np.array([[(-1.0, 1.0)[(a >> d) & 1] for d in range(dim)] for a in range(n)])
    # N_a(xi) = prod_d (1 + s_ad xi_d) / 2
    fac = 0.5 * (1.0 + pts[:, None, :] * signs[None, :, :])  # (nq, nen, dim)
    N = np.prod(fac, axis=2)
    dN = np.empty((n, n, dim))
    for d in range(dim):
        other = np.prod(np.delete(fac, d, axis=2), axis=2) if dim > 1 else 1.0
        dN[:, :, d] = 0.5 * signs[None, :, d] * other
    weights = np.ones(n)
    return pts, weights, N, dN


def elasticity_moduli(dim, E, nu):
    """Isotropic constitutive matrix in Voigt form (plane strain in 2D)."""
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    nn = dim
    nv = 3 if dim == 2 else 6
    D = np.zeros((nv, nv))
    D[:nn, :nn] = lam
    D[np.arange(nn), np.arange(nn)] += 2.0 * mu
    D[np.arange(nn, nv), np.arange(nn, nv)] = mu
    return D


def _strain_operator(G, dim):
    """B matrices, shape (..., nv, nen*dim), from physical gradients G (..., nen, dim)."""
    nen = G.shape[-2]
    lead = G.shape[:-2]
    if dim == 3:
        B = np.zeros(lead + (6, nen * 3))
        gx, gy, gz = G[..., 0], G[..., 1], G[..., 2]
        B[..., 0, 0::3] = gx
        B[..., 1, 1::3] = gy
        B[..., 2, 2::3] = gz
        B[..., 3, 1::3] = gz
        B[..., 3, 2::3] = gy
        B[..., 4, 0::3] = gz
        B[..., 4, 2::3] = gx
        B[..., 5, 0::3] = gy
        B[..., 5, 1::3] = gx
    else:
        B = np.zeros(lead + (3, nen * 2))
        gx, gy = G[..., 0], G[..., 1]
        B[..., 0, 0::2] = gx
        B[..., 1, 1::2] = gy
        B[..., 2, 0::2] = gy
        B[..., 2, 1::2] = gx
    return B


def element_matrices(coords, coef, kind, nu=0.3):
    """Element stiffness matrices and quadrature Jacobian determinants.

    ``coords`` is (nel, nen, dim), ``coef`` is (nel,).  Returns ``Ke`` with
    shape (nel, nen*dpn, nen*dpn) and ``detJ`` with shape (nel, nq).
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    dim = coords.shape[2]
    _, w, _, dN = reference_rule(dim)
    J = np.einsum("ead,qak->eqdk", coords, dN)
    detJ = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    # dN/dx_d = sum_k dN/dxi_k * dxi_k/dx_d
    G = np.einsum("qak,eqkd->eqad", dN, Jinv)
    scale = w[None, :] * detJ
    if kind == POISSON:
        Ke = np.einsum("eq,eqad,eqbd->eab", scale, G, G)
        Ke *= coef[:, None, None]
    else:
        D = elasticity_moduli(dim, 1.0, nu)
        B = _strain_operator(G, dim)
        Ke = np.einsum("eq,eqvi,vw,eqwj->eij", scale, B, D, B)
        Ke *= coef[:, None, None]
    Ke = 0.5 * (Ke + np.transpose(Ke, (0, 2, 1)))
    return Ke, detJ
