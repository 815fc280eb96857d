"""Distributed drivers over the emulated RMA layer.

Rank 0 owns the global model; ranks 1.. own patches.  Each rank is a thread
and every cross-rank exchange goes through :mod:`glcoupling.asyncomm` windows:
one trace window per patch (written by rank 0), one reaction window per patch
(written by the patch owner) and a one-byte stop flag (written by rank 0).

``#iter. glob.`` in reports counts global solves.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass

import numpy as np

from glcoupling import asyncomm as rma
from glcoupling.coupling import ABS_FLOOR, CoupledSystem, Stagnation, aitken_omega, richardson_update
from glcoupling.report import RunReport

log = logging.getLogger(__name__)

CONTINUE = "continue"
CONVERGED = "converged"


@dataclass(frozen=True)
class RankAssignment:
    num_ranks: int
    owner: tuple[int, ...]  # owner rank of each patch
    policy: str = "block"
    seed: int | None = None

    def patches_of(self, rank: int) -> list[int]:
        return [s for s, r in enumerate(self.owner) if r == rank]

    @property
    def workers(self) -> range:
        return range(1, self.num_ranks)


def assign_patches(num_patches: int, num_ranks: int, policy: str = "block", seed: int = 0) -> RankAssignment:
    if num_ranks < 2:
        raise ValueError("need at least one global rank and one worker rank")
    if num_patches < 1:
        raise ValueError("need at least one patch")
    workers = num_ranks - 1
    if workers > num_patches:
        raise ValueError(f"{workers} worker ranks for {num_patches} patches would leave idle workers")
    if policy == "block":
        owner = np.empty(num_patches, dtype=int)
        for w, chunk in enumerate(np.array_split(np.arange(num_patches), workers)):
            owner[chunk] = w + 1
        return RankAssignment(num_ranks, tuple(int(o) for o in owner), "block", None)
    if policy == "random":
        rng = np.random.default_rng(seed)
        owner = rng.integers(1, num_ranks, size=num_patches)
        while True:
            counts = np.bincount(owner, minlength=num_ranks)[1:]
            empty = np.flatnonzero(counts == 0)
            if not empty.size:
                break
            donor = int(np.argmax(counts)) + 1
            victim = int(np.flatnonzero(owner == donor)[-1])
            owner[victim] = int(empty[0]) + 1
        return RankAssignment(num_ranks, tuple(int(o) for o in owner), "random", seed)
    raise ValueError(f"unknown assignment policy {policy!r}")


class Backoff:
    """Wait for new data: a few yielding spins, then bounded sleeps that end
    early as soon as any window commits a put."""

    def __init__(self, world: rma.World | None = None, spins: int = 0, sleep: float = 1e-3):
        self.world = world
        self.spins = spins
        self.sleep = sleep
        self.count = 0
        self.seen = world.commits if world is not None else 0

    def reset(self) -> None:
        self.count = 0

    def wait(self) -> None:
        self.count += 1
        if self.count <= self.spins:
            time.sleep(0)
        elif self.world is not None:
            self.seen = self.world.wait_progress(self.seen, self.sleep)
        else:
            time.sleep(self.sleep)


class AsyncConvergenceDetector:
    """Stopping rule that is robust to stale, mixed-iteration reactions.

    A small residual nominates the trace index it was produced under; the run
    is declared converged only once every patch has answered a trace at least
    that recent and the residual is still below tolerance.
    """

    def __init__(self, tol: float):
        self.tol = tol
        self.candidate: int | None = None

    def update(self, rel: float, reaction_indices, current_trace: int) -> str:
        if self.candidate is None:
            if rel > self.tol:
                return CONTINUE
            self.candidate = current_trace
        if min(reaction_indices) >= self.candidate:
            if rel <= self.tol:
                return CONVERGED
            self.candidate = None
        return CONTINUE


def detect_convergence_async(detector: AsyncConvergenceDetector, rel: float, reaction_indices, current_trace: int) -> str:
    return detector.update(rel, reaction_indices, current_trace)


def _slow_down(latency: rma.LatencyModel, rank: int, unit: float) -> None:
    factor = latency.slowdown.get(rank, 1.0)
    if factor > 1.0:
        time.sleep((factor - 1.0) * unit)


class _Run:
    """Shared plumbing for both drivers: windows, threads, bookkeeping."""

    def __init__(self, system: CoupledSystem, assignment: RankAssignment, latency, fence_timeout: float):
        if len(assignment.owner) != system.n_patches:
            raise ValueError("assignment does not match the number of patches")
        self.system = system
        self.assignment = assignment
        self.latency = latency or rma.LatencyModel()
        self.world = rma.World(assignment.num_ranks, self.latency, fence_timeout)
        self.trace_win = []
        self.react_win = []
        for s in range(system.n_patches):
            n = system.locals[s].iface_index.size
            self.trace_win.append(self.world.win_create(("trace", s), 0, rma.payload_size(n)))
            self.react_win.append(self.world.win_create(("reaction", s), assignment.owner[s], rma.payload_size(n)))
        self.stop_win = self.world.win_create("stop", 0, 1)
        self.local_counts = [0] * system.n_patches
        # uncontended cost of one local solve, the unit of injected slowdown
        self.ref_time = []
        for s in range(system.n_patches):
            t = time.perf_counter()
            system.local_solve(s, np.zeros(system.locals[s].iface_index.size))
            self.ref_time.append(time.perf_counter() - t)
        self.fields: dict[int, np.ndarray] = {}
        self.errors: list[BaseException] = []
        self.stop_event = threading.Event()

    def local_step(self, rank: int, s: int, payload: bytes) -> bytes:
        idx, trace = rma.decode_payload(payload)
        tl = self.world.timeline(rank)
        with tl.span("compute"):
            lam, u = self.system.local_solve(s, trace)
            _slow_down(self.latency, rank, self.ref_time[s])
        self.local_counts[s] += 1
        self.fields[s] = u
        return rma.encode_payload(idx, lam)

    def launch(self, target_global, target_worker) -> None:
        def guard(fn, rank):
            def body():
                self.world.timeline(rank).start()
                try:
                    fn(rank)
                except BaseException as exc:  # surfaced after join
                    self.errors.append(exc)
                    self.stop_event.set()
                finally:
                    self.world.timeline(rank).stop()
            return body

        threads = [threading.Thread(target=guard(target_worker, r), name=f"rank-{r}", daemon=True)
                   for r in self.assignment.workers]
        for th in threads:
            th.start()
        guard(target_global, 0)()
        for th in threads:
            th.join()
        if self.errors:
            raise self.errors[0]

    def finish(self, report: RunReport, t0: float) -> RunReport:
        report.wall_time = time.perf_counter() - t0
        report.local_solves = list(self.local_counts)
        tls = self.world.timelines
        report.comm_fractions = {r: rma.measure_comm_fraction(tl) for r, tl in tls.items()}
        total_wall = sum(tl.wall for tl in tls.values())
        total_comm = sum(tl.comm_time for tl in tls.values())
        report.comm_fraction = float(min(1.0, total_comm / total_wall)) if total_wall > 0 else 0.0
        report.u_local = [self.fields.get(s) for s in range(self.system.n_patches)]
        return report


def run_sync_distributed(
    system: CoupledSystem,
    assignment: RankAssignment,
    mode: str = "aitken",
    omega: float = 1.0,
    tol: float = 1e-7,
    max_iterations: int = 500,
    latency: rma.LatencyModel | None = None,
    fence_timeout: float = 60.0,
) -> RunReport:
    """The alternating iteration with fence-separated phases.

    Numerically identical to :func:`coupling.run_synchronous`: reactions travel
    as raw float64 and are reduced in ascending patch id.
    """
    if mode not in ("fixed", "aitken", "submodeling"):
        raise ValueError(f"unknown synchronous mode {mode!r}")
    run = _Run(system, assignment, latency, fence_timeout)
    group = run.world.fence_group()
    report = RunReport(mode=mode)
    t0 = time.perf_counter()

    def global_rank(rank):
        tl = run.world.timeline(rank)
        p = np.zeros(system.n_iface)
        omega_k, r_prev, r0 = omega, None, None
        group.fence(rank)  # opens the first access epoch
        stop_ep = group.epoch(rank, run.stop_win)
        for k in range(max_iterations):
            with tl.span("compute"):
                u_g = system.global_solve(p)
            for s, win in enumerate(run.trace_win):
                group.epoch(rank, win).put(rma.encode_payload(k + 1, system.trace(s, u_g)))
            stop_ep.put(b"\x00")
            group.fence(rank)  # traces visible
            group.fence(rank)  # reactions visible
            reactions = []
            for s, win in enumerate(run.react_win):
                idx, lam = rma.decode_payload(group.epoch(rank, win).get()[0])
                if idx != k + 1:
                    raise RuntimeError(f"patch {s} answered trace {idx}, expected {k + 1}")
                reactions.append(lam)
            with tl.span("compute"):
                r = system.residual(reactions, system.complement_reaction(u_g))
            norm = float(np.linalg.norm(r))
            r0 = norm if r0 is None else r0
            rel = norm / r0 if r0 > 0 else 0.0
            report.global_iterations += 1
            report.record(k, norm, rel, omega_k, time.perf_counter() - t0)
            report.p, report.u_global, report.final_rel_residual = p, u_g, rel
            if norm <= ABS_FLOOR or rel <= tol:
                report.converged = True
                break
            if mode == "submodeling":
                break
            if mode == "aitken" and r_prev is not None:
                try:
                    omega_k = aitken_omega(r_prev, r, omega_k)
                except Stagnation:
                    omega_k = omega
            p = richardson_update(p, r, omega_k)
            r_prev = r
        stop_ep.put(b"\x01")
        group.fence(rank)

    def worker_rank(rank):
        owned = assignment.patches_of(rank)
        group.fence(rank)
        stop_ep = group.epoch(rank, run.stop_win)
        while True:
            group.fence(rank)
            if stop_ep.get()[0] == b"\x01":
                return
            for s in owned:
                payload = group.epoch(rank, run.trace_win[s]).get()[0]
                group.epoch(rank, run.react_win[s]).put(run.local_step(rank, s, payload))
            group.fence(rank)

    run.launch(global_rank, worker_rank)
    return run.finish(report, t0)


def run_async(
    system: CoupledSystem,
    assignment: RankAssignment,
    omega: float = 0.5,
    tol: float = 1e-7,
    max_iterations: int = 5000,
    latency: rma.LatencyModel | None = None,
    stall_timeout: float = 5.0,
    wall_budget: float = 600.0,
    lockstep: bool = False,
) -> RunReport:
    """Relaxed asynchronous iteration with passive-target epochs.

    The global rank folds in whatever reactions are newest, relaxes ``p`` with
    a fixed ``omega`` and republishes traces; patch ranks answer any trace
    newer than the one they last processed.  ``lockstep`` makes the global
    rank wait for every patch to answer the current trace (a synchronous
    schedule through the asynchronous machinery).
    """
    run = _Run(system, assignment, latency, fence_timeout=stall_timeout)
    report = RunReport(mode="async")
    t0 = time.perf_counter()
    n = system.n_patches

    def publish(rank, index, u_g):
        for s, win in enumerate(run.trace_win):
            with win.lock(rank, rma.EXCLUSIVE) as ep:
                ep.put(rma.encode_payload(index, system.trace(s, u_g)))
                ep.flush()

    def raise_stop(rank):
        with run.stop_win.lock(rank, rma.EXCLUSIVE) as ep:
            ep.put(b"\x01")
            ep.flush()

    def global_rank(rank):
        tl = run.world.timeline(rank)
        detector = AsyncConvergenceDetector(tol)
        backoff = Backoff(run.world)
        p = np.zeros(system.n_iface)
        g = 1
        with tl.span("compute"):
            u_g = system.global_solve(p)
            # zone reactions of every published trace still referenced by a patch
            zones = {g: [system.zone_reaction(s, u_g) for s in range(n)]}
        publish(rank, g, u_g)
        report.global_iterations = 1
        seen = [0] * n
        lam = [None] * n
        lam_idx = [0] * n
        r0 = None
        last_advance = time.perf_counter()
        warned = False
        try:
            while not run.stop_event.is_set():
                if time.perf_counter() - t0 > wall_budget:
                    report.notes.append(f"wall budget of {wall_budget}s exhausted")
                    break
                advanced = False
                for s, win in enumerate(run.react_win):
                    with win.lock(rank, rma.SHARED) as ep:
                        data, ver = ep.get()
                    if ver != seen[s]:
                        seen[s] = ver
                        lam_idx[s], lam[s] = rma.decode_payload(data)
                        advanced = True
                ready = min(lam_idx) >= (g if lockstep else 1)
                if not advanced or not ready:
                    now = time.perf_counter()
                    if advanced:
                        last_advance = now
                    elif not warned and now - last_advance > stall_timeout:
                        stale = [s for s in range(n) if lam_idx[s] < g]
                        msg = f"no reaction advanced for {stall_timeout}s; stale patches {stale}"
                        log.warning(msg)
                        report.notes.append(msg)
                        warned = True
                    with tl.span("wait"):
                        backoff.wait()
                    continue
                backoff.reset()
                last_advance = time.perf_counter()
                warned = False
                with tl.span("compute"):
                    r = system.paired_residual(p, lam, [zones[lam_idx[s]][s] for s in range(n)])
                norm = float(np.linalg.norm(r))
                r0 = norm if r0 is None else r0
                rel = norm / r0 if r0 > 0 else 0.0
                report.record(g, norm, rel, omega, time.perf_counter() - t0)
                report.final_rel_residual = rel
                report.p, report.u_global = p, u_g
                if norm <= ABS_FLOOR or detector.update(rel, lam_idx, g) == CONVERGED:
                    report.converged = True
                    break
                if report.global_iterations >= max_iterations:
                    break
                with tl.span("compute"):
                    p = richardson_update(p, r, omega)
                    u_g = system.global_solve(p)
                    g += 1
                    zones[g] = [system.zone_reaction(s, u_g) for s in range(n)]
                    for old in [k for k in zones if k < min(lam_idx)]:
                        del zones[old]
                report.global_iterations += 1
                publish(rank, g, u_g)
        finally:
            raise_stop(rank)
            run.stop_event.set()

    def worker_rank(rank):
        owned = assignment.patches_of(rank)
        tl = run.world.timeline(rank)
        last = {s: 0 for s in owned}
        backoff = Backoff(run.world)
        stalled = rank in run.latency.stalled
        while True:
            with run.stop_win.lock(rank, rma.SHARED) as ep:
                if ep.get()[0] == b"\x01":
                    return
            if run.stop_event.is_set():
                return
            worked = False
            if not stalled:
                for s in owned:
                    with run.trace_win[s].lock(rank, rma.SHARED) as ep:
                        data, ver = ep.get()
                    if ver == 0 or ver == last[s]:
                        continue
                    last[s] = ver
                    out = run.local_step(rank, s, data)
                    with run.react_win[s].lock(rank, rma.EXCLUSIVE) as ep:
                        ep.put(out)
                        ep.flush()
                    worked = True
            if worked:
                backoff.reset()
            else:
                with tl.span("wait"):
                    backoff.wait()

    run.launch(global_rank, worker_rank)
    return run.finish(report, t0)
