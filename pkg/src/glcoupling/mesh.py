"""Structured cuboid meshes, patch decompositions and inclusion tagging.

The domain is a box tiled by ``nx * ny * nz`` cubic cells of edge ``patch_side``.
The global (coarse) mesh covers the whole box and conforms to every cell face.
Every patched cell additionally gets an independent fine mesh.  Cells without a
patch form the complement zone, which is represented by the global mesh only.

Setting ``nz = 0`` switches to the 2D variant (bilinear quadrilaterals); every
function below is written for either dimension.

Node ordering inside an element follows the tensor bits of the local index:
local node ``a`` sits at offset ``(a & 1, (a >> 1) & 1, (a >> 2) & 1)`` in
lattice steps from the element's lowest corner.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

QUANTUM_FACTOR = 1e-9


class ConfigurationError(ValueError):
    """Raised for an inconsistent grid specification."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    patch_side: float = 1.0
    h_global: float = 0.5
    h_fine: float = 0.125
    # None means every cell is patched.
    patched_cells: frozenset[int] | None = None
    conforming_interfaces: bool = False

    def __post_init__(self):
        if self.patched_cells is not None:
            object.__setattr__(self, "patched_cells", frozenset(int(c) for c in self.patched_cells))
        self.validate()

    @property
    def dim(self) -> int:
        return 2 if self.nz == 0 else 3

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx, self.ny) if self.dim == 2 else (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cells(self) -> tuple[int, ...]:
        if self.patched_cells is None:
            return tuple(range(self.n_cells))
        return tuple(sorted(self.patched_cells))

    @property
    def full_coverage(self) -> bool:
        return len(self.cells) == self.n_cells

    @property
    def effective_h_global(self) -> float:
        # matching layouts: the global lattice is generated at the fine spacing
        return self.h_fine if self.conforming_interfaces else self.h_global

    def divisions(self, h: float, name: str) -> int:
        if not h > 0:
            raise ConfigurationError(f"{name} must be positive, got {h!r}")
        n = int(round(self.patch_side / h))
        if n < 1 or abs(n * h - self.patch_side) > 1e-9 * self.patch_side:
            raise ConfigurationError(
                f"{name}={h!r} does not divide patch_side={self.patch_side!r} into an integer count"
            )
        return n

    def validate(self) -> None:
        for name in ("nx", "ny"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.nz < 0:
            raise ConfigurationError("nz must be >= 0 (0 selects the 2D variant)")
        if not self.patch_side > 0:
            raise ConfigurationError("patch_side must be positive")
        self.divisions(self.h_global, "h_global")
        self.divisions(self.h_fine, "h_fine")
        if self.h_fine > self.h_global * (1 + 1e-12):
            raise ConfigurationError("h_fine must not exceed h_global")
        if self.patched_cells is not None:
            bad = [c for c in self.patched_cells if not 0 <= c < self.n_cells]
            if bad:
                raise ConfigurationError(f"patched_cells out of range: {sorted(bad)}")


@dataclass(frozen=True, eq=False)
class StructuredMesh:
    """Tensor-product mesh of axis-aligned Q1 elements."""

    nodes: np.ndarray
    elements: np.ndarray
    axes: tuple[np.ndarray, ...]
    quantum: float
    node_index: dict = field(repr=False)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def key(self, coord) -> tuple[int, ...]:
        return tuple(int(v) for v in np.rint(np.asarray(coord, dtype=float) / self.quantum))

    def lookup(self, coord) -> int:
        """Node id at ``coord``; KeyError if no node sits there."""
        return self.node_index[self.key(coord)]

    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def element_volumes(self) -> np.ndarray:
        lo = self.nodes[self.elements[:, 0]]
        hi = self.nodes[self.elements[:, -1]]
        return np.prod(hi - lo, axis=1)

    def nodes_on_plane(self, axis: int, value: float) -> np.ndarray:
        return np.flatnonzero(np.abs(self.nodes[:, axis] - value) <= self.quantum)


def structured_mesh(origin, counts, h: float, quantum: float) -> StructuredMesh:
    """Box mesh with ``counts[d]`` elements of size ``h`` along axis ``d``."""
    origin = np.asarray(origin, dtype=float)
    counts = tuple(int(c) for c in counts)
    dim = len(counts)
    axes = tuple(origin[d] + np.arange(counts[d] + 1) * h for d in range(dim))
    # x varies fastest
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel(order="F") for g in grids], axis=1)

    npts = [c + 1 for c in counts]
    strides = np.cumprod([1] + npts[:-1])
    ranges = np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")
    base = sum(r.ravel(order="F") * s for r, s in zip(ranges, strides))
    offsets = []
    for a in range(2**dim):
        offsets.append(sum(((a >> d) & 1) * strides[d] for d in range(dim)))
    elements = base[:, None] + np.asarray(offsets)[None, :]

    keys = np.rint(nodes / quantum).astype(np.int64)
    node_index = {tuple(k): i for i, k in enumerate(keys.tolist())}
    return StructuredMesh(nodes, elements.astype(np.int64), axes, quantum, node_index)


@dataclass(frozen=True, eq=False)
class InterfaceDef:
    patch_id: int
    # closure of the interface, i.e. including edges where it meets the outer boundary
    global_iface_nodes: np.ndarray
    fine_iface_nodes: np.ndarray
    neighbor_info: dict


@dataclass(frozen=True, eq=False)
class Patch:
    id: int
    cell: int
    origin: np.ndarray
    mesh: StructuredMesh
    zone_elements: np.ndarray
    interface: InterfaceDef
    boundary_nodes: np.ndarray  # every fine node on the cell boundary


@dataclass(frozen=True, eq=False)
class PatchDecomposition:
    spec: GridSpec
    global_mesh: StructuredMesh
    element_cell: np.ndarray
    patches: tuple[Patch, ...]
    complement_elements: np.ndarray
    boundary_nodes: np.ndarray  # global nodes on the outer boundary

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.spec.shape, dtype=float) * self.spec.patch_side


@dataclass(frozen=True, eq=False)
class MaterialField:
    values: np.ndarray
    matrix_value: float
    inclusion_value: float
    inclusion_center: np.ndarray
    inclusion_radius: float

    @property
    def contrast(self) -> float:
        return self.matrix_value / self.inclusion_value

    @classmethod
    def homogeneous(cls, mesh: StructuredMesh, value: float = 1.0) -> "MaterialField":
        return cls(np.full(mesh.n_elements, float(value)), value, value, np.zeros(mesh.dim), 0.0)


def cell_multi_index(spec: GridSpec, cell: int) -> tuple[int, ...]:
    return tuple(int(v) for v in np.unravel_index(cell, spec.shape, order="F"))


def _boundary_faces(spec: GridSpec, cell: int):
    """Yield (axis, coordinate, on_outer_boundary) for the 2*dim faces of a cell."""
    idx = cell_multi_index(spec, cell)
    for d, n in enumerate(spec.shape):
        for side in (0, 1):
            on_outer = (idx[d] == 0 and side == 0) or (idx[d] == n - 1 and side == 1)
            yield d, (idx[d] + side) * spec.patch_side, on_outer


def _nodes_in_box(mesh: StructuredMesh, lo, hi) -> np.ndarray:
    q = mesh.quantum
    inside = np.all((mesh.nodes >= lo - q) & (mesh.nodes <= hi + q), axis=1)
    return np.flatnonzero(inside)


def _interface_closure(mesh: StructuredMesh, spec: GridSpec, cell: int) -> np.ndarray:
    idx = np.asarray(cell_multi_index(spec, cell), dtype=float)
    lo, hi = idx * spec.patch_side, (idx + 1) * spec.patch_side
    box = _nodes_in_box(mesh, lo, hi)
    sel = np.zeros(box.size, dtype=bool)
    for d, coord, on_outer in _boundary_faces(spec, cell):
        if not on_outer:
            sel |= np.abs(mesh.nodes[box, d] - coord) <= mesh.quantum
    return box[sel]


def _cell_boundary(mesh: StructuredMesh, spec: GridSpec, cell: int) -> np.ndarray:
    idx = np.asarray(cell_multi_index(spec, cell), dtype=float)
    lo, hi = idx * spec.patch_side, (idx + 1) * spec.patch_side
    box = _nodes_in_box(mesh, lo, hi)
    x = mesh.nodes[box]
    q = mesh.quantum
    on = np.any((np.abs(x - lo) <= q) | (np.abs(x - hi) <= q), axis=1)
    return box[on]


def generate_patch_grid(spec: GridSpec) -> PatchDecomposition:
    """Build the conforming global mesh and one fine mesh per patched cell."""
    spec.validate()
    side = spec.patch_side
    hg = spec.effective_h_global
    mg = spec.divisions(hg, "h_global")
    mf = spec.divisions(spec.h_fine, "h_fine")
    quantum = QUANTUM_FACTOR * spec.h_global

    gmesh = structured_mesh(np.zeros(spec.dim), [n * mg for n in spec.shape], hg, quantum)
    cell_idx = np.floor(gmesh.centroids() / side).astype(np.int64)
    element_cell = np.ravel_multi_index(tuple(cell_idx.T), spec.shape, order="F").astype(np.int64)

    extent = np.asarray(spec.shape, dtype=float) * side
    outer = np.any((np.abs(gmesh.nodes) <= quantum) | (np.abs(gmesh.nodes - extent) <= quantum), axis=1)
    boundary_nodes = np.flatnonzero(outer)

    cells = spec.cells
    closures = {cell: _interface_closure(gmesh, spec, cell) for cell in cells}
    adjacency: dict[int, set[int]] = {}
    for s, cell in enumerate(cells):
        for n in closures[cell].tolist():
            adjacency.setdefault(n, set()).add(s)

    patches = []
    for s, cell in enumerate(cells):
        origin = np.asarray(cell_multi_index(spec, cell), dtype=float) * side
        fmesh = structured_mesh(origin, [mf] * spec.dim, spec.h_fine, quantum)
        gnodes = closures[cell]
        iface = InterfaceDef(
            patch_id=s,
            global_iface_nodes=gnodes,
            fine_iface_nodes=_interface_closure(fmesh, spec, cell),
            neighbor_info={n: frozenset(adjacency[n]) for n in gnodes.tolist()},
        )
        patches.append(
            Patch(
                id=s,
                cell=cell,
                origin=origin,
                mesh=fmesh,
                zone_elements=np.flatnonzero(element_cell == cell),
                interface=iface,
                boundary_nodes=_cell_boundary(fmesh, spec, cell),
            )
        )

    patched = np.isin(element_cell, np.asarray(cells, dtype=np.int64))
    return PatchDecomposition(
        spec=spec,
        global_mesh=gmesh,
        element_cell=element_cell,
        patches=tuple(patches),
        complement_elements=np.flatnonzero(~patched),
        boundary_nodes=boundary_nodes,
    )


def tag_inclusion(
    mesh: StructuredMesh,
    center,
    radius: float,
    matrix_value: float = 1.0,
    inclusion_value: float = 0.01,
) -> MaterialField:
    """Piecewise-constant coefficient with a spherical inclusion (centroid test)."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    center = np.asarray(center, dtype=float)
    dist = np.linalg.norm(mesh.centroids() - center, axis=1)
    values = np.where(dist <= radius, inclusion_value, matrix_value).astype(float)
    if radius == 0:
        values[:] = matrix_value
    return MaterialField(values, float(matrix_value), float(inclusion_value), center, float(radius))


def interface_adjacency(decomp: PatchDecomposition) -> dict[int, tuple[frozenset[int], bool]]:
    """Map every global interface node to (adjacent patch ids, touches complement)."""
    gmesh = decomp.global_mesh
    in_complement = np.zeros(gmesh.n_elements, dtype=bool)
    in_complement[decomp.complement_elements] = True
    node_touches = np.zeros(gmesh.n_nodes, dtype=bool)
    comp_nodes = gmesh.elements[in_complement].ravel()
    node_touches[comp_nodes] = True

    out: dict[int, tuple[frozenset[int], bool]] = {}
    for patch in decomp.patches:
        for n in patch.interface.global_iface_nodes.tolist():
            if n not in out:
                out[n] = (patch.interface.neighbor_info[n], bool(node_touches[n]))
    return dict(sorted(out.items()))


def cells_from_ranges(spec_shape: Iterable[int], ranges) -> frozenset[int]:
    """Cell ids for an axis-aligned block given as per-axis ``range`` objects."""
    shape = tuple(spec_shape)
    return frozenset(
        int(np.ravel_multi_index(idx, shape, order="F")) for idx in itertools.product(*ranges)
    )
