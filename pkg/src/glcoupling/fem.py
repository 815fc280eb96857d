"""Q1 finite elements for Poisson and linear elasticity.

Assembly, Dirichlet elimination with lifting, a reusable factorization of the
reduced operator, and nodal reaction extraction.  Dofs are numbered node-major:
``dof = node * dofs_per_node + component``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from glcoupling.kernels import ELASTICITY, POISSON, element_matrices, reference_rule
from glcoupling.mesh import MaterialField, StructuredMesh


class AssemblyError(RuntimeError):
    pass


class FactorizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Physics:
    kind: str = "poisson"
    poisson_ratio: float = 0.3
    # None selects the unit source: 1 for Poisson, (1, ..., 1) for elasticity
    source: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("poisson", "elasticity"):
            raise ValueError(f"unknown physics kind {self.kind!r}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must lie in [0, 0.5)")

    def dofs_per_node(self, dim: int) -> int:
        return 1 if self.kind == "poisson" else dim

    def source_vector(self, dim: int) -> np.ndarray:
        dpn = self.dofs_per_node(dim)
        if self.source is None:
            return np.ones(dpn)
        src = np.asarray(self.source, dtype=float).ravel()
        if src.size != dpn:
            raise ValueError(f"source has {src.size} components, expected {dpn}")
        return src

    @property
    def kernel(self) -> int:
        return POISSON if self.kind == "poisson" else ELASTICITY


@dataclass(eq=False)
class AssembledProblem:
    stiffness: sp.csr_matrix
    load: np.ndarray
    mesh: StructuredMesh
    physics: Physics
    material: MaterialField
    element_subset: np.ndarray | None = None
    _subset_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.load.size

    @property
    def dofs_per_node(self) -> int:
        return self.physics.dofs_per_node(self.mesh.dim)

    def node_dofs(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        dpn = self.dofs_per_node
        return (nodes[:, None] * dpn + np.arange(dpn)[None, :]).ravel()

    def restricted(self, element_subset) -> "AssembledProblem":
        """Assembly over ``element_subset`` only (cached per subset)."""
        subset = np.asarray(element_subset, dtype=np.int64)
        key = subset.tobytes()
        if key not in self._subset_cache:
            self._subset_cache[key] = assemble(self.mesh, self.physics, self.material, subset)
        return self._subset_cache[key]


def _sum_entries(rows, cols, vals, n):
    # bincount accumulates in input order, so K[i, j] and K[j, i] see identical sums
    keys = rows * n + cols
    uniq, inverse = np.unique(keys, return_inverse=True)
    data = np.bincount(inverse, weights=vals, minlength=uniq.size)
    r = uniq // n
    indptr = np.searchsorted(r, np.arange(n + 1))
    return sp.csr_matrix((data, uniq % n, indptr), shape=(n, n))


def element_dofs(elements: np.ndarray, dpn: int) -> np.ndarray:
    return (elements[:, :, None] * dpn + np.arange(dpn)).reshape(elements.shape[0], -1)


def assemble(
    mesh: StructuredMesh,
    physics: Physics,
    material: MaterialField,
    element_subset=None,
) -> AssembledProblem:
    """Assemble K and f with 2^dim-point Gauss quadrature.

    Only the elements listed in ``element_subset`` contribute when it is given.
    """
    dim = mesh.dim
    dpn = physics.dofs_per_node(dim)
    n = mesh.n_nodes * dpn
    if element_subset is None:
        elems = np.arange(mesh.n_elements)
    else:
        elems = np.asarray(element_subset, dtype=np.int64)
    conn = mesh.elements[elems]
    coef = np.asarray(material.values, dtype=float)[elems]

    Ke, detJ = element_matrices(mesh.nodes[conn], coef, physics.kernel, physics.poisson_ratio)
    bad = np.flatnonzero(np.any(detJ <= 0, axis=1))
    if bad.size:
        raise AssemblyError(f"non-positive Jacobian in element {int(elems[bad[0]])}")

    edofs = element_dofs(conn, dpn)
    nd = edofs.shape[1]
    rows = np.repeat(edofs, nd, axis=1).ravel()
    cols = np.tile(edofs, (1, nd)).ravel()
    K = _sum_entries(rows, cols, Ke.ravel(), n)

    _, w, N, _ = reference_rule(dim)
    nodal = np.einsum("eq,q,qa->ea", detJ, w, N)  # integral of N_a per element
    src = physics.source_vector(dim)
    fe = (nodal[:, :, None] * src[None, None, :]).reshape(len(elems), -1)
    f = np.bincount(edofs.ravel(), weights=fe.ravel(), minlength=n)

    subset = None if element_subset is None else elems
    return AssembledProblem(K, f, mesh, physics, material, subset)


@dataclass(eq=False)
class ReducedProblem:
    problem: AssembledProblem
    free: np.ndarray
    constrained: np.ndarray
    values: np.ndarray
    K_ff: sp.csc_matrix
    K_fc: sp.csr_matrix

    def lifted_rhs(self, values=None, extra=None) -> np.ndarray:
        """f_free - K_fc u_c, optionally with an extra full-size load added."""
        vals = self.values if values is None else values
        f = self.problem.load if extra is None else self.problem.load + extra
        return f[self.free] - self.K_fc @ vals

    def expand(self, u_free, values=None) -> np.ndarray:
        u = np.empty(self.problem.n_dofs)
        u[self.free] = u_free
        u[self.constrained] = self.values if values is None else values
        return u


def apply_dirichlet(problem: AssembledProblem, constrained) -> ReducedProblem:
    """Eliminate constrained dofs; ``constrained`` is a dof->value map or (dofs, values)."""
    if isinstance(constrained, Mapping):
        dofs = np.fromiter(constrained.keys(), dtype=np.int64, count=len(constrained))
        vals = np.fromiter(constrained.values(), dtype=float, count=len(constrained))
    else:
        dofs, vals = constrained
        dofs = np.asarray(dofs, dtype=np.int64).ravel()
        vals = np.broadcast_to(np.asarray(vals, dtype=float), dofs.shape).copy()
    n = problem.n_dofs
    if dofs.size and (dofs.min() < 0 or dofs.max() >= n):
        raise IndexError("constrained dof outside the problem")
    order = np.argsort(dofs, kind="stable")
    dofs, vals = dofs[order], vals[order]
    dup = np.flatnonzero(np.diff(dofs) == 0)
    if dup.size:
        clash = dup[vals[dup] != vals[dup + 1]]
        if clash.size:
            raise ValueError(f"dof {int(dofs[clash[0]])} constrained twice with different values")
        keep = np.ones(dofs.size, dtype=bool)
        keep[dup + 1] = False
        dofs, vals = dofs[keep], vals[keep]

    mask = np.ones(n, dtype=bool)
    mask[dofs] = False
    free = np.flatnonzero(mask)
    K = problem.stiffness
    K_f = K[free]
    return ReducedProblem(
        problem=problem,
        free=free,
        constrained=dofs,
        values=vals,
        K_ff=K_f[:, free].tocsc(),
        K_fc=K_f[:, dofs].tocsr(),
    )


def _symmetric_lu(matrix):
    return spla.splu(
        matrix,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )


class Factorization:
    """Reusable solver for a fixed reduced operator."""

    def __init__(self, matrix, method: str = "direct", rtol: float = 1e-12):
        self.matrix = sp.csc_matrix(matrix)
        self.method = method
        self.rtol = rtol
        self.n = self.matrix.shape[0]
        self._lu = None
        if self.n == 0:
            return
        if method == "direct":
            try:
                self._lu = _symmetric_lu(self.matrix)
            except RuntimeError:
                # exactly singular: refactor with a tiny shift to locate the vanishing pivot
                scale = float(np.abs(self.matrix.diagonal()).max() or 1.0)
                shifted = _symmetric_lu(self.matrix + 1e-13 * scale * sp.identity(self.n, format="csc"))
                pivots = np.abs(shifted.U.diagonal())
                k = int(np.argmin(pivots))
                col = int(np.argsort(shifted.perm_c)[k])
                raise FactorizationError(f"matrix is singular: zero pivot {k} at dof {col}") from None
            pivots = self._lu.U.diagonal()
            bad = np.flatnonzero(~(pivots > 0))
            if bad.size:
                col = int(np.argsort(self._lu.perm_c)[bad[0]])
                raise FactorizationError(
                    f"matrix is not positive definite: pivot {bad[0]} = {pivots[bad[0]]:.3e} at dof {col}"
                )
        elif method == "cg":
            d = self.matrix.diagonal()
            if np.any(d <= 0):
                col = int(np.flatnonzero(d <= 0)[0])
                raise FactorizationError(f"non-positive diagonal at dof {col}")
            self._precond = spla.LinearOperator(self.matrix.shape, matvec=lambda x: x / d)
        else:
            raise ValueError(f"unknown solver method {method!r}")

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.n == 0:
            return np.zeros(0)
        if self._lu is not None:
            return self._lu.solve(rhs)
        x, info = spla.cg(self.matrix, rhs, rtol=self.rtol, atol=0.0, M=self._precond, maxiter=10 * self.n)
        if info != 0:
            raise FactorizationError(f"conjugate gradients did not converge (info={info})")
        return x


def factorize(reduced: ReducedProblem | sp.spmatrix, method: str = "direct") -> Factorization:
    matrix = reduced.K_ff if isinstance(reduced, ReducedProblem) else reduced
    return Factorization(matrix, method)


def resolve(fact: Factorization, rhs) -> np.ndarray:
    return fact.solve(rhs)


def solve_dirichlet(problem: AssembledProblem, constrained, method: str = "direct") -> np.ndarray:
    """One-shot convenience: eliminate, factorize, solve, and expand to all dofs."""
    red = apply_dirichlet(problem, constrained)
    return red.expand(factorize(red, method).solve(red.lifted_rhs()))


def reaction(problem: AssembledProblem, solution, dofs, element_subset=None) -> np.ndarray:
    """Nodal reactions ``(K u - f)`` at ``dofs``, from ``element_subset`` only if given."""
    dofs = np.asarray(dofs, dtype=np.int64)
    if dofs.size and (dofs.min() < 0 or dofs.max() >= problem.n_dofs):
        raise IndexError("requested dof outside the problem")
    src = problem if element_subset is None else problem.restricted(element_subset)
    u = np.asarray(solution, dtype=float)
    return src.stiffness[dofs] @ u - src.load[dofs]


def boundary_dofs(mesh: StructuredMesh, physics: Physics, lo=None, hi=None) -> np.ndarray:
    """Dofs of nodes on the faces of the bounding box [lo, hi] (mesh box by default)."""
    lo = mesh.nodes.min(axis=0) if lo is None else np.asarray(lo, dtype=float)
    hi = mesh.nodes.max(axis=0) if hi is None else np.asarray(hi, dtype=float)
    q = mesh.quantum
    on = np.any((np.abs(mesh.nodes - lo) <= q) | (np.abs(mesh.nodes - hi) <= q), axis=1)
    dpn = physics.dofs_per_node(mesh.dim)
    nodes = np.flatnonzero(on)
    return (nodes[:, None] * dpn + np.arange(dpn)).ravel()
