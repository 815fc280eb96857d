"""Non-intrusive global/local coupling with synchronous and asynchronous drivers."""

from glcoupling.coupling import (
    CoupledSystem,
    aitken_omega,
    build_system,
    build_transfer,
    monolithic_reference,
    richardson_update,
    run_synchronous,
)
from glcoupling.fem import Physics, apply_dirichlet, assemble, factorize, reaction, solve_dirichlet
from glcoupling.kernels import BACKEND
from glcoupling.mesh import GridSpec, generate_patch_grid, structured_mesh, tag_inclusion
from glcoupling.report import RunReport
from glcoupling.runtime import assign_patches, run_async, run_sync_distributed

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CoupledSystem",
    "GridSpec",
    "Physics",
    "RunReport",
    "aitken_omega",
    "apply_dirichlet",
    "assemble",
    "assign_patches",
    "build_system",
    "build_transfer",
    "factorize",
    "generate_patch_grid",
    "monolithic_reference",
    "reaction",
    "richardson_update",
    "run_async",
    "run_sync_distributed",
    "run_synchronous",
    "solve_dirichlet",
    "structured_mesh",
    "tag_inclusion",
]
