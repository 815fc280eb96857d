import pytest

from glcoupling.coupling import build_system
from glcoupling.fem import Physics
from glcoupling.mesh import GridSpec, generate_patch_grid


def make_system(nx=2, ny=2, nz=2, kind="poisson", contrast=100.0, **grid):
    decomp = generate_patch_grid(GridSpec(nx, ny, nz, **grid))
    return build_system(decomp, Physics(kind), contrast=contrast)


@pytest.fixture(scope="session")
def poisson8():
    return make_system()


@pytest.fixture(scope="session")
def elasticity8():
    return make_system(kind="elasticity")


@pytest.fixture(scope="session")
def conforming2():
    return make_system(2, 1, 1, conforming_interfaces=True)


@pytest.fixture(scope="session")
def partial2d():
    # 3x3 cells in 2D, only the centre and a corner patched: nonempty complement
    return make_system(3, 3, 0, patched_cells=[0, 4])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
