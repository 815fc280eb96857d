"""Non-intrusive global/local coupling iteration.

The global model is solved with an interface load ``p``; every patch then
solves a fine Dirichlet problem driven by the global trace and returns its
interface reaction.  The residual is the negated sum of all reactions (fine
patches plus the unpatched complement) and drives a relaxed update of ``p``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from glcoupling import fem
from glcoupling.mesh import InterfaceDef, MaterialField, Patch, PatchDecomposition, StructuredMesh, tag_inclusion
from glcoupling.report import RunReport

OMEGA_MIN = 0.1
OMEGA_MAX = 1.9
ABS_FLOOR = 1e-14
STAGNATION = 1e-15


class GeometryError(ValueError):
    pass


class Stagnation(ArithmeticError):
    """Successive residuals coincide, so the Aitken ratio is undefined."""


@dataclass(frozen=True, eq=False)
class TransferOperator:
    """Interpolation of global interface traces onto fine interface nodes."""

    patch_id: int
    matrix: sp.csr_matrix  # (fine iface nodes, global iface nodes)
    fine_nodes: np.ndarray
    global_nodes: np.ndarray

    def dof_matrix(self, dpn: int) -> sp.csr_matrix:
        if dpn == 1:
            return self.matrix
        return sp.kron(self.matrix, sp.identity(dpn), format="csr")


def build_transfer(iface: InterfaceDef, global_mesh: StructuredMesh, fine_mesh: StructuredMesh,
                   tol: float = 1e-9) -> TransferOperator:
    """Evaluate global Q1 shape functions at every fine interface node."""
    gnodes = np.asarray(iface.global_iface_nodes, dtype=np.int64)
    fnodes = np.asarray(iface.fine_iface_nodes, dtype=np.int64)
    allowed = np.zeros(global_mesh.n_nodes, dtype=bool)
    allowed[gnodes] = True
    npts = [a.size for a in global_mesh.axes]
    strides = np.cumprod([1] + npts[:-1])

    rows, cols, vals = [], [], []
    for row, n in enumerate(fnodes.tolist()):
        x = fine_mesh.nodes[n]
        lo_idx, weights = [], []
        for d, ax in enumerate(global_mesh.axes):
            i = int(np.clip(np.searchsorted(ax, x[d], side="right") - 1, 0, ax.size - 2))
            span = ax[i + 1] - ax[i]
            t = (x[d] - ax[i]) / span
            if t < -tol or t > 1 + tol:
                raise GeometryError(f"fine node {n} at {x.tolist()} lies outside the global mesh")
            if abs(t) <= tol:
                t = 0.0
            elif abs(t - 1) <= tol:
                t = 1.0
            lo_idx.append(i)
            weights.append((1.0 - t, t))
        for a in range(2**global_mesh.dim):
            wgt = 1.0
            gid = 0
            for d in range(global_mesh.dim):
                bit = (a >> d) & 1
                wgt *= weights[d][bit]
                gid += (lo_idx[d] + bit) * int(strides[d])
            if wgt == 0.0:
                continue
            if not allowed[gid]:
                raise GeometryError(
                    f"fine interface node {n} at {x.tolist()} is not on a global interface face of patch {iface.patch_id}"
                )
            rows.append(row)
            cols.append(int(np.searchsorted(gnodes, gid)))
            vals.append(wgt)
    J = sp.csr_matrix((vals, (rows, cols)), shape=(fnodes.size, gnodes.size))
    return TransferOperator(iface.patch_id, J, fnodes, gnodes)


@dataclass(eq=False)
class LocalModel:
    patch: Patch
    problem: fem.AssembledProblem
    reduced: fem.ReducedProblem
    factorization: fem.Factorization
    transfer: TransferOperator
    J: sp.csr_matrix
    fine_iface_dofs: np.ndarray
    bc_positions: np.ndarray
    closure_free: np.ndarray  # mask over closure dofs: not on the outer boundary
    iface_index: np.ndarray  # positions of this patch's dofs in the coupled interface vector

    @property
    def id(self) -> int:
        return self.patch.id


@dataclass(eq=False)
class CoupledSystem:
    decomp: PatchDecomposition
    physics: fem.Physics
    global_problem: fem.AssembledProblem
    global_reduced: fem.ReducedProblem
    global_factorization: fem.Factorization
    iface_dofs: np.ndarray
    locals: list[LocalModel]
    complement_K: sp.csr_matrix | None
    complement_f: np.ndarray | None
    fine_materials: list[MaterialField] = field(default_factory=list)
    zone_K: list[sp.csr_matrix] = field(default_factory=list)
    zone_f: list[np.ndarray] = field(default_factory=list)

    @property
    def n_patches(self) -> int:
        return len(self.locals)

    @property
    def n_iface(self) -> int:
        return self.iface_dofs.size

    def patch_dofs(self, s: int) -> np.ndarray:
        return self.iface_dofs[self.locals[s].iface_index]

    def scatter(self, s: int, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_iface)
        out[self.locals[s].iface_index] = values
        return out

    # -- the four building blocks of one iteration --------------------------

    def global_solve(self, p) -> np.ndarray:
        extra = np.zeros(self.global_problem.n_dofs)
        extra[self.iface_dofs] = p
        red = self.global_reduced
        return red.expand(self.global_factorization.solve(red.lifted_rhs(extra=extra)))

    def trace(self, s: int, u_global: np.ndarray) -> np.ndarray:
        """Global solution on patch ``s``'s interface dofs (the trace payload)."""
        return u_global[self.patch_dofs(s)]

    def local_solve(self, s: int, trace: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Fine Dirichlet solve; returns (reaction on patch iface dofs, fine field)."""
        lm = self.locals[s]
        try:
            closure = np.zeros(lm.closure_free.size)
            closure[lm.closure_free] = trace
            values = np.zeros(lm.reduced.constrained.size)
            values[lm.bc_positions] = lm.J @ closure
            red = lm.reduced
            u = red.expand(lm.factorization.solve(red.lifted_rhs(values)), values)
            lam_fine = fem.reaction(lm.problem, u, lm.fine_iface_dofs)
        except Exception as exc:  # annotate with the patch for diagnostics
            raise type(exc)(f"patch {s}: {exc}") from exc
        lam = lm.J.T @ lam_fine
        return lam[lm.closure_free], u

    def complement_reaction(self, u_global: np.ndarray) -> np.ndarray:
        if self.complement_K is None:
            return np.zeros(self.n_iface)
        return self.complement_K @ u_global - self.complement_f

    def zone_reaction(self, s: int, u_global: np.ndarray) -> np.ndarray:
        """Reaction of the global model's patch-``s`` zone on that patch's iface dofs."""
        return self.zone_K[s] @ u_global - self.zone_f[s]

    def residual(self, reactions, lam_complement: np.ndarray) -> np.ndarray:
        """r = -(sum_s lambda_s + lambda_0), summed in ascending patch id."""
        total = np.zeros(self.n_iface)
        for s, lam in enumerate(reactions):
            total[self.locals[s].iface_index] += lam
        total += lam_complement
        return -total

    def paired_residual(self, p, reactions, zone_reactions) -> np.ndarray:
        """Residual with each fine reaction paired to the global zone reaction of
        the same trace: r = sum_s (zone_s - lambda_s) - p.

        Equal to :meth:`residual` when every reaction answers the current trace,
        because the global equilibrium gives lambda_0 + sum_s zone_s = p.
        """
        total = np.zeros(self.n_iface)
        for s, (lam, zone) in enumerate(zip(reactions, zone_reactions)):
            total[self.locals[s].iface_index] += zone - lam
        return total - p

    def evaluate(self, p):
        """One full sweep at load ``p``: (u_G, reactions, fine fields, r)."""
        u_g = self.global_solve(p)
        reactions, fields = [], []
        for s in range(self.n_patches):
            lam, u = self.local_solve(s, self.trace(s, u_g))
            reactions.append(lam)
            fields.append(u)
        r = self.residual(reactions, self.complement_reaction(u_g))
        return u_g, reactions, fields, r


def _patch_dirichlet(problem: fem.AssembledProblem, patch: Patch):
    dofs = problem.node_dofs(patch.boundary_nodes)
    return np.sort(dofs)


def build_system(
    decomp: PatchDecomposition,
    physics: fem.Physics,
    contrast: float = 100.0,
    radius: float | None = None,
    center_offset=None,
    matrix_value: float = 1.0,
    solver: str = "direct",
) -> CoupledSystem:
    """Assemble and factor the global model and every fine patch model."""
    spec = decomp.spec
    gmesh = decomp.global_mesh
    dim = gmesh.dim
    radius = spec.patch_side / 4 if radius is None else radius
    offset = np.zeros(dim) if center_offset is None else np.asarray(center_offset, dtype=float)[:dim]

    gmat = MaterialField.homogeneous(gmesh, matrix_value)
    gprob = fem.assemble(gmesh, physics, gmat)
    dpn = physics.dofs_per_node(dim)
    outer = gprob.node_dofs(decomp.boundary_nodes)
    gred = fem.apply_dirichlet(gprob, (outer, 0.0))
    gfact = fem.factorize(gred, solver)

    closure_nodes = [p.interface.global_iface_nodes for p in decomp.patches]
    on_outer = np.zeros(gmesh.n_nodes, dtype=bool)
    on_outer[decomp.boundary_nodes] = True
    if closure_nodes:
        nodes = np.unique(np.concatenate(closure_nodes))
        nodes = nodes[~on_outer[nodes]]
    else:
        nodes = np.zeros(0, dtype=np.int64)
    iface_dofs = gprob.node_dofs(nodes)

    locals_, materials = [], []
    for patch in decomp.patches:
        center = patch.origin + spec.patch_side / 2 + offset
        mat = tag_inclusion(patch.mesh, center, radius, matrix_value, matrix_value / contrast)
        prob = fem.assemble(patch.mesh, physics, mat)
        bdofs = _patch_dirichlet(prob, patch)
        red = fem.apply_dirichlet(prob, (bdofs, 0.0))
        fact = fem.factorize(red, solver)
        transfer = build_transfer(patch.interface, gmesh, patch.mesh)
        fdofs = prob.node_dofs(transfer.fine_nodes)
        closure_dofs = gprob.node_dofs(transfer.global_nodes)
        free = ~np.repeat(on_outer[transfer.global_nodes], dpn)
        locals_.append(
            LocalModel(
                patch=patch,
                problem=prob,
                reduced=red,
                factorization=fact,
                transfer=transfer,
                J=transfer.dof_matrix(dpn),
                fine_iface_dofs=fdofs,
                bc_positions=np.searchsorted(red.constrained, fdofs),
                closure_free=free,
                iface_index=np.searchsorted(iface_dofs, closure_dofs[free]),
            )
        )
        materials.append(mat)

    comp_K = comp_f = None
    if decomp.complement_elements.size and iface_dofs.size:
        sub = gprob.restricted(decomp.complement_elements)
        comp_K = sub.stiffness[iface_dofs]
        comp_f = sub.load[iface_dofs]

    zone_K, zone_f = [], []
    for lm in locals_:
        rows = iface_dofs[lm.iface_index]
        sub = gprob.restricted(lm.patch.zone_elements)
        zone_K.append(sub.stiffness[rows])
        zone_f.append(sub.load[rows])

    return CoupledSystem(decomp, physics, gprob, gred, gfact, iface_dofs, locals_, comp_K, comp_f,
                         materials, zone_K, zone_f)


def richardson_update(p: np.ndarray, r: np.ndarray, omega: float) -> np.ndarray:
    if not 0.0 < omega < 2.0:
        raise ValueError(f"relaxation {omega} outside (0, 2)")
    return p + omega * r


def aitken_omega(r_prev, r, omega_prev: float, bounds=(OMEGA_MIN, OMEGA_MAX)) -> float:
    """Aitken dynamic relaxation from two successive interface residuals."""
    r_prev = np.asarray(r_prev, dtype=float)
    dr = np.asarray(r, dtype=float) - r_prev
    den = float(dr @ dr)
    if np.sqrt(den) < STAGNATION * np.linalg.norm(r_prev) or den == 0.0:
        raise Stagnation("residual increment vanished")
    omega = -omega_prev * float(r_prev @ dr) / den
    return float(np.clip(omega, *bounds))


def run_synchronous(
    system: CoupledSystem,
    mode: str = "aitken",
    omega: float = 1.0,
    tol: float = 1e-7,
    max_iterations: int = 500,
    on_iterate: Callable | None = None,
) -> RunReport:
    """Alternating global/local iteration.

    ``mode`` is ``fixed`` (constant ``omega``), ``aitken`` (dynamic relaxation
    starting from ``omega``) or ``submodeling`` (one sweep, no feedback).
    """
    if mode not in ("fixed", "aitken", "submodeling"):
        raise ValueError(f"unknown synchronous mode {mode!r}")
    t0 = time.perf_counter()
    report = RunReport(mode=mode, local_solves=[0] * system.n_patches)
    p = np.zeros(system.n_iface)
    omega0 = omega
    r_prev = None
    r0 = None
    for k in range(max_iterations):
        u_g, reactions, fields, r = system.evaluate(p)
        report.global_iterations += 1
        report.local_solves = [c + 1 for c in report.local_solves]
        norm = float(np.linalg.norm(r))
        if r0 is None:
            r0 = norm
        rel = norm / r0 if r0 > 0 else 0.0
        report.record(k, norm, rel, omega, time.perf_counter() - t0)
        report.p, report.u_global, report.u_local = p, u_g, fields
        report.final_rel_residual = rel
        if on_iterate is not None:
            on_iterate(k, p, u_g, fields, r)
        if norm <= ABS_FLOOR or rel <= tol:
            report.converged = True
            break
        if mode == "submodeling":
            break
        if mode == "aitken" and r_prev is not None:
            try:
                omega = aitken_omega(r_prev, r, omega)
            except Stagnation:
                omega = omega0
        p = richardson_update(p, r, omega)
        r_prev = r
    report.wall_time = time.perf_counter() - t0
    return report


def monolithic_reference(system: CoupledSystem) -> np.ndarray:
    """Solve the assembled heterogeneous problem on the global lattice.

    Patch cells carry the fine material (mapped element-by-element by
    centroid), complement cells keep the global material.  Only meaningful
    when the fine meshes coincide with the global lattice.
    """
    decomp = system.decomp
    gmesh = decomp.global_mesh
    values = np.asarray(system.global_problem.material.values, dtype=float).copy()
    cents = gmesh.centroids()
    for lm, mat in zip(system.locals, system.fine_materials):
        fmesh = lm.patch.mesh
        fc = fmesh.centroids()
        lookup = {fmesh.key(c): i for i, c in enumerate(fc)}
        for e in lm.patch.zone_elements.tolist():
            values[e] = mat.values[lookup[gmesh.key(cents[e])]]
    mat = MaterialField(values, float(values.max()), float(values.min()), np.zeros(gmesh.dim), 0.0)
    prob = fem.assemble(gmesh, system.physics, mat)
    outer = prob.node_dofs(decomp.boundary_nodes)
    return fem.solve_dirichlet(prob, (outer, 0.0))


def restrict_to_patch(system: CoupledSystem, s: int, u_global_lattice: np.ndarray) -> np.ndarray:
    """Pick the values of a global-lattice field at patch ``s``'s fine nodes."""
    gmesh = system.decomp.global_mesh
    fmesh = system.locals[s].patch.mesh
    dpn = system.physics.dofs_per_node(gmesh.dim)
    ids = np.array([gmesh.lookup(x) for x in fmesh.nodes])
    return u_global_lattice.reshape(-1, dpn)[ids].ravel()
