# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled element kernels; same contract as ``_kernels_py.element_matrices``."""

import numpy as np

from glcoupling._kernels_py import elasticity_moduli, reference_rule

cdef enum:
    POISSON = 0
    ELASTICITY = 1


cdef inline double _invert(double[:, ::1] J, double[:, ::1] Ji, Py_ssize_t dim) noexcept nogil:
    cdef double det
    if dim == 2:
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        Ji[0, 0] = J[1, 1] / det
        Ji[0, 1] = -J[0, 1] / det
        Ji[1, 0] = -J[1, 0] / det
        Ji[1, 1] = J[0, 0] / det
        return det
    det = (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
           - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
           + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))
    Ji[0, 0] = (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]) / det
    Ji[0, 1] = (J[0, 2] * J[2, 1] - J[0, 1] * J[2, 2]) / det
    Ji[0, 2] = (J[0, 1] * J[1, 2] - J[0, 2] * J[1, 1]) / det
    Ji[1, 0] = (J[1, 2] * J[2, 0] - J[1, 0] * J[2, 2]) / det
    Ji[1, 1] = (J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]) / det
    Ji[1, 2] = (J[0, 2] * J[1, 0] - J[0, 0] * J[1, 2]) / det
    Ji[2, 0] = (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]) / det
    Ji[2, 1] = (J[0, 1] * J[2, 0] - J[0, 0] * J[2, 1]) / det
    Ji[2, 2] = (J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]) / det
    return det


cdef void _fill_strain(double[:, ::1] G, double[:, ::1] B, Py_ssize_t nen, Py_ssize_t dim) noexcept nogil:
    cdef Py_ssize_t a, i, j
    for i in range(B.shape[0]):
        for j in range(B.shape[1]):
            B[i, j] = 0.0
    for a in range(nen):
        if dim == 3:
            B[0, 3 * a] = G[a, 0]
            B[1, 3 * a + 1] = G[a, 1]
            B[2, 3 * a + 2] = G[a, 2]
            B[3, 3 * a + 1] = G[a, 2]
            B[3, 3 * a + 2] = G[a, 1]
            B[4, 3 * a] = G[a, 2]
            B[4, 3 * a + 2] = G[a, 0]
            B[5, 3 * a] = G[a, 1]
            B[5, 3 * a + 1] = G[a, 0]
        else:
            B[0, 2 * a] = G[a, 0]
            B[1, 2 * a + 1] = G[a, 1]
            B[2, 2 * a] = G[a, 1]
            B[2, 2 * a + 1] = G[a, 0]


def element_matrices(coords, coef, int kind, double nu=0.3):
    cdef double[:, :, ::1] X = np.ascontiguousarray(coords, dtype=np.float64)
    cdef double[::1] c = np.ascontiguousarray(coef, dtype=np.float64)
    cdef Py_ssize_t nel = X.shape[0]
    cdef Py_ssize_t nen = X.shape[1]
    cdef Py_ssize_t dim = X.shape[2]
    cdef Py_ssize_t dpn = 1 if kind == POISSON else dim
    cdef Py_ssize_t nd = nen * dpn
    cdef Py_ssize_t nv = 3 if dim == 2 else 6

    _, w_np, _, dN_np = reference_rule(dim)
    cdef double[:, :, ::1] dN = np.ascontiguousarray(dN_np)
    cdef double[::1] w = np.ascontiguousarray(w_np)
    cdef Py_ssize_t nq = w.shape[0]
    cdef double[:, ::1] D = np.ascontiguousarray(elasticity_moduli(dim, 1.0, nu))

    Ke_np = np.zeros((nel, nd, nd))
    detJ_np = np.empty((nel, nq))
    cdef double[:, :, ::1] Ke = Ke_np
    cdef double[:, ::1] detJ = detJ_np

    cdef double[:, ::1] J = np.empty((dim, dim))
    cdef double[:, ::1] Ji = np.empty((dim, dim))
    cdef double[:, ::1] G = np.empty((nen, dim))
    cdef double[:, ::1] B = np.empty((nv, nd))
    cdef double[:, ::1] DB = np.empty((nv, nd))

    cdef Py_ssize_t e, q, a, b, d, k, i, j, v, u
    cdef double det, s, acc, tmp

    with nogil:
        for e in range(nel):
            for q in range(nq):
                for d in range(dim):
                    for k in range(dim):
                        acc = 0.0
                        for a in range(nen):
                            acc = acc + X[e, a, d] * dN[q, a, k]
                        J[d, k] = acc
                det = _invert(J, Ji, dim)
                detJ[e, q] = det
                s = w[q] * det * c[e]
                for a in range(nen):
                    for d in range(dim):
                        acc = 0.0
                        for k in range(dim):
                            acc = acc + dN[q, a, k] * Ji[k, d]
                        G[a, d] = acc
                if kind == POISSON:
                    for a in range(nen):
                        for b in range(nen):
                            acc = 0.0
                            for d in range(dim):
                                acc = acc + G[a, d] * G[b, d]
                            Ke[e, a, b] += s * acc
                else:
                    _fill_strain(G, B, nen, dim)
                    for v in range(nv):
                        for j in range(nd):
                            acc = 0.0
                            for u in range(nv):
                                acc = acc + D[v, u] * B[u, j]
                            DB[v, j] = acc
                    for i in range(nd):
                        for j in range(nd):
                            acc = 0.0
                            for v in range(nv):
                                acc = acc + B[v, i] * DB[v, j]
                            Ke[e, i, j] += s * acc
            for i in range(nd):
                for j in range(i + 1, nd):
                    tmp = 0.5 * (Ke[e, i, j] + Ke[e, j, i])
                    Ke[e, i, j] = tmp
                    Ke[e, j, i] = tmp
    return Ke_np, detJ_np
