import numpy as np
import pytest

from glcoupling.asyncomm import LatencyModel
from glcoupling.coupling import run_synchronous
from glcoupling.runtime import (
    CONTINUE,
    CONVERGED,
    AsyncConvergenceDetector,
    assign_patches,
    run_async,
    run_sync_distributed,
)


def test_block_assignment_table_rows():
    a = assign_patches(64, 65)
    assert all(len(a.patches_of(r)) == 1 for r in a.workers)
    a = assign_patches(64, 9)
    assert [a.patches_of(r) for r in (1, 8)] == [list(range(8)), list(range(56, 64))]


def test_block_assignment_is_balanced():
    a = assign_patches(10, 4)
    assert sorted(len(a.patches_of(r)) for r in a.workers) == [3, 3, 4]


def test_random_assignment_deterministic_and_repaired():
    a = assign_patches(128, 65, "random", seed=1)
    assert a == assign_patches(128, 65, "random", seed=1)
    assert all(a.patches_of(r) for r in a.workers)
    assert a != assign_patches(128, 65, "random", seed=2)


@pytest.mark.parametrize("args", [(8, 1), (0, 3), (4, 6)])
def test_assignment_errors(args):
    with pytest.raises(ValueError):
        assign_patches(*args)


def test_detector_requires_fresh_reactions():
    d = AsyncConvergenceDetector(1e-6)
    assert d.update(1e-3, [3, 3], 3) == CONTINUE
    assert d.update(1e-8, [3, 2], 4) == CONTINUE  # candidate 4 nominated
    assert d.update(1e-8, [4, 3], 4) == CONTINUE  # patch 1 still stale
    assert d.update(1e-8, [4, 4], 5) == CONVERGED


def test_detector_resets_on_relapse():
    d = AsyncConvergenceDetector(1e-6)
    d.update(1e-8, [1, 1], 2)
    assert d.update(1e-3, [2, 2], 3) == CONTINUE
    assert d.candidate is None


@pytest.mark.parametrize("mode", ["aitken", "fixed", "submodeling"])
def test_distributed_sync_matches_in_process(poisson8, mode):
    ref = run_synchronous(poisson8, mode)
    got = run_sync_distributed(poisson8, assign_patches(8, 4), mode)
    assert got.global_iterations == ref.global_iterations
    assert np.array_equal(got.p, ref.p)
    assert got.local_solves == [ref.global_iterations] * 8


def test_single_worker_with_complement(partial2d):
    ref = run_synchronous(partial2d, "aitken")
    got = run_sync_distributed(partial2d, assign_patches(2, 2), "aitken")
    assert np.array_equal(got.p, ref.p)


def test_fence_latency_accounted(poisson8):
    lat = LatencyModel(rank_delay_ms={1: 10.0})
    rep = run_sync_distributed(poisson8, assign_patches(8, 3), "aitken", latency=lat)
    k = rep.global_iterations
    # rank 1 sleeps 10 ms in each of its 2k+2 fences; everybody else waits for it
    assert rep.comm_fractions[1] * rep.wall_time >= 0.010 * k
    assert 0 <= rep.comm_fraction <= 1


def test_async_lockstep_matches_sync_stopping_iteration(poisson8):
    ref = run_synchronous(poisson8, "fixed", omega=0.5)
    rep = run_async(poisson8, assign_patches(8, 9), omega=0.5, lockstep=True)
    assert rep.converged
    assert abs(rep.global_iterations - ref.global_iterations) <= 1


def test_async_zero_latency_fixed_point(poisson8):
    ref = run_synchronous(poisson8, "fixed", omega=0.5, tol=1e-9)
    rep = run_async(poisson8, assign_patches(8, 5), omega=0.5, tol=1e-9)
    assert rep.converged
    assert np.linalg.norm(rep.p - ref.p) / np.linalg.norm(ref.p) < 1e-6
    assert rep.loc_min >= 1 and rep.loc_min <= rep.loc_max


def test_async_stalled_workers_exit_cleanly(poisson8):
    lat = LatencyModel(stalled=frozenset({1, 2}))
    rep = run_async(poisson8, assign_patches(8, 3), stall_timeout=0.2, wall_budget=1.0, latency=lat)
    assert not rep.converged
    assert any("no reaction advanced" in n for n in rep.notes)
    assert any("wall budget" in n for n in rep.notes)
    assert rep.local_solves == [0] * 8


def test_async_trivial_problem_converges_immediately():
    from conftest import make_system

    s = make_system(2, 1, 0, contrast=1.0, conforming_interfaces=True)
    rep = run_async(s, assign_patches(2, 3))
    assert rep.converged and rep.global_iterations == 1


def test_async_report_cell_shape(poisson8):
    rep = run_async(poisson8, assign_patches(8, 9))
    import re

    assert re.fullmatch(r"\d+\[\d+, \d+\] & \d+\.\d\ds\[\d+%\]", rep.cell())
