"""Emulated one-sided (RMA) communication between in-process ranks.

Ranks are threads.  A :class:`Window` is a fixed-size byte buffer with one
designated writer; readers take consistent snapshots through a seqlock (the
version is odd while a write is in flight), so a reader never waits on the
writer's scheduling.  Operations are only legal inside an epoch, opened either
passively with :meth:`Window.lock` or actively by a collective
:meth:`FenceGroup.fence`.

Injected latency delays the *completion* of puts (they become visible at the
next flush, unlock or fence once the delay has elapsed) and of gets.  All time
spent inside these calls is charged to the calling rank's :class:`Timeline`.
"""

from __future__ import annotations

import struct
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

SHARED = "shared_read"
EXCLUSIVE = "exclusive_write"

HEADER = struct.Struct("<Q")
_CHUNK = 4096


class EpochError(RuntimeError):
    """Operation outside an open epoch, nested lock, or unlock without lock."""


class WriterContractError(RuntimeError):
    """A rank other than the designated writer tried to write."""


class FenceTimeout(TimeoutError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"fence watchdog expired; ranks never arrived: {self.missing}")


def encode_payload(index: int, vector) -> bytes:
    """u64 iteration index followed by float64 values."""
    return HEADER.pack(int(index)) + np.ascontiguousarray(vector, dtype="<f8").tobytes()


def decode_payload(data: bytes) -> tuple[int, np.ndarray]:
    (index,) = HEADER.unpack_from(data, 0)
    return index, np.frombuffer(data, dtype="<f8", offset=HEADER.size).copy()


def payload_size(n_values: int) -> int:
    return HEADER.size + 8 * n_values


# -- instrumentation ---------------------------------------------------------


class Timeline:
    """Per-rank accounting of communication, waiting and compute time."""

    def __init__(self, rank: int):
        self.rank = rank
        self.totals = {"comm": 0.0, "wait": 0.0, "compute": 0.0}
        self.counts = {"comm": 0, "wait": 0, "compute": 0}
        self.t_start = time.perf_counter()
        self.t_stop: float | None = None

    def start(self) -> None:
        self.t_start = time.perf_counter()
        self.t_stop = None

    def stop(self) -> None:
        self.t_stop = time.perf_counter()

    def add(self, kind: str, seconds: float) -> None:
        self.totals[kind] += seconds
        self.counts[kind] += 1

    @contextmanager
    def span(self, kind: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.add(kind, time.perf_counter() - t)

    @property
    def wall(self) -> float:
        end = self.t_stop if self.t_stop is not None else time.perf_counter()
        return end - self.t_start

    @property
    def comm_time(self) -> float:
        return self.totals["comm"] + self.totals["wait"]


def measure_comm_fraction(timeline: Timeline) -> float:
    """Share of the rank's wall time spent in window operations or waiting."""
    wall = timeline.wall
    if wall <= 0:
        return 0.0
    return float(min(1.0, max(0.0, timeline.comm_time / wall)))


# -- latency -----------------------------------------------------------------


@dataclass
class LatencyModel:
    """Added per-operation delays, plus compute slowdowns for the drivers.

    ``delay_ms`` applies to every rank; ``rank_delay_ms`` overrides it per rank
    with a fixed value or a ``(lo, hi)`` uniform range.  ``slowdown`` multiplies
    a rank's local-solve time and ``stalled`` ranks never do any work; both are
    honored by the runtime drivers rather than by the windows.
    """

    delay_ms: float | tuple[float, float] = 0.0
    rank_delay_ms: dict = field(default_factory=dict)
    slowdown: dict = field(default_factory=dict)
    stalled: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        self._rngs: dict[int, np.random.Generator] = {}
        self._lock = threading.Lock()

    def spec_for(self, rank: int):
        return self.rank_delay_ms.get(rank, self.delay_ms)

    def delay(self, rank: int) -> float:
        """Next delay for ``rank`` in seconds (seeded per rank)."""
        spec = self.spec_for(rank)
        if isinstance(spec, (tuple, list)):
            lo, hi = spec
            with self._lock:
                rng = self._rngs.setdefault(rank, np.random.default_rng([self.seed, rank]))
                ms = rng.uniform(lo, hi)
        else:
            ms = float(spec)
        return ms / 1000.0

    def is_zero(self) -> bool:
        specs = [self.delay_ms, *self.rank_delay_ms.values()]
        return all((max(s) if isinstance(s, (tuple, list)) else s) == 0 for s in specs)


NO_LATENCY = LatencyModel()


def _sleep_until(deadline: float) -> None:
    while True:
        left = deadline - time.perf_counter()
        if left <= 0:
            return
        time.sleep(left)


# -- windows -----------------------------------------------------------------


class Epoch:
    def __init__(self, window: "Window", rank: int, mode: str, active: bool = False):
        self.window = window
        self.rank = rank
        self.mode = mode
        self.active = active
        self.open = True

    def put(self, payload) -> None:
        self.window.put(payload, self)

    def get(self) -> tuple[bytes, int]:
        return self.window.get(self)

    def flush(self) -> None:
        self.window.flush(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self.active and self.open:
            self.window.unlock(self.rank)


class Window:
    """Single-writer versioned byte buffer."""

    def __init__(self, world: "World", channel, owner: int, size: int):
        if size <= 0:
            raise ValueError("window size must be positive")
        self.world = world
        self.channel = channel
        self.owner = owner
        self.size = size
        self._buf = bytearray(size)
        self._version = 0
        self._epochs: dict[int, Epoch] = {}
        self._book = threading.Lock()
        self._pending: deque[tuple[float, bytes]] = deque()
        self._active: set[int] = set()

    @property
    def version(self) -> int:
        return self._version

    # epochs
    def lock(self, rank: int, mode: str = SHARED) -> Epoch:
        if mode not in (SHARED, EXCLUSIVE):
            raise ValueError(f"unknown lock mode {mode!r}")
        if mode == EXCLUSIVE and rank != self.owner:
            raise WriterContractError(f"rank {rank} cannot lock window {self.channel!r} for writing")
        with self.world.timeline(rank).span("comm"):
            with self._book:
                if rank in self._epochs:
                    raise EpochError(f"rank {rank} already holds an epoch on {self.channel!r}")
                ep = Epoch(self, rank, mode)
                self._epochs[rank] = ep
        return ep

    def unlock(self, rank: int) -> None:
        with self._book:
            ep = self._epochs.get(rank)
        if ep is None:
            raise EpochError(f"rank {rank} has no open epoch on {self.channel!r}")
        if rank == self.owner:
            self._complete(rank)
        with self._book:
            ep.open = False
            del self._epochs[rank]

    def _check(self, epoch: Epoch) -> None:
        if epoch is None or epoch.window is not self or not epoch.open:
            raise EpochError(f"no open epoch on window {self.channel!r}")
        if epoch.active and epoch.rank not in self._active:
            raise EpochError(f"rank {epoch.rank} is outside the fence epoch of {self.channel!r}")

    # data movement
    def put(self, payload, epoch: Epoch) -> None:
        self._check(epoch)
        if epoch.rank != self.owner:
            raise WriterContractError(f"rank {epoch.rank} is not the writer of {self.channel!r}")
        if epoch.mode != EXCLUSIVE:
            raise EpochError("put requires an exclusive_write epoch")
        data = bytes(payload)
        if len(data) != self.size:
            raise ValueError(f"payload of {len(data)} bytes does not fit window of {self.size} bytes")
        with self.world.timeline(epoch.rank).span("comm"):
            delay = self.world.latency.delay(epoch.rank)
            now = time.perf_counter()
            while self._pending and self._pending[0][0] <= now:
                self._commit(self._pending.popleft()[1])
            if delay == 0.0 and not self._pending:
                self._commit(data)
            else:
                self._pending.append((now + delay, data))

    def get(self, epoch: Epoch) -> tuple[bytes, int]:
        self._check(epoch)
        with self.world.timeline(epoch.rank).span("comm"):
            data, version = self.snapshot()
            delay = self.world.latency.delay(epoch.rank)
            if delay:
                time.sleep(delay)
        return data, version

    def flush(self, epoch: Epoch) -> None:
        self._check(epoch)
        if epoch.rank == self.owner and self._pending:
            with self.world.timeline(epoch.rank).span("comm"):
                self._complete(epoch.rank)

    def _complete(self, rank: int) -> None:
        while self._pending:
            deadline, data = self._pending.popleft()
            _sleep_until(deadline)
            self._commit(data)

    def _commit(self, data: bytes) -> None:
        # seqlock write: odd version while the bytes are in flight
        self._version += 1
        buf = self._buf
        buf[: HEADER.size] = data[: HEADER.size]
        for i in range(HEADER.size, self.size, _CHUNK):
            buf[i : i + _CHUNK] = data[i : i + _CHUNK]
        self._version += 1
        self.world.notify_progress()

    def snapshot(self) -> tuple[bytes, int]:
        """Consistent copy of the payload and its (even) version."""
        while True:
            v1 = self._version
            if v1 & 1:
                time.sleep(0)
                continue
            data = bytes(self._buf)
            if self._version == v1:
                return data, v1


class _Barrier:
    def __init__(self, ranks, timeout: float):
        self.ranks = frozenset(ranks)
        self.timeout = timeout
        self._cond = threading.Condition()
        self._arrived: set[int] = set()
        self._generation = 0
        self._broken: frozenset | None = None

    def wait(self, rank: int) -> None:
        with self._cond:
            if self._broken is not None:
                raise FenceTimeout(self._broken)
            gen = self._generation
            self._arrived.add(rank)
            if self._arrived >= self.ranks:
                self._arrived.clear()
                self._generation += 1
                self._cond.notify_all()
                return
            deadline = time.monotonic() + self.timeout
            while gen == self._generation and self._broken is None:
                left = deadline - time.monotonic()
                if left <= 0:
                    self._broken = frozenset(self.ranks - self._arrived)
                    self._cond.notify_all()
                    break
                self._cond.wait(left)
            if gen == self._generation:
                raise FenceTimeout(self._broken)


class FenceGroup:
    """Active-target synchronization over a set of windows and ranks."""

    def __init__(self, world: "World", ranks, windows, timeout: float | None = None):
        self.world = world
        self.ranks = frozenset(ranks)
        self.windows = list(windows)
        self._barrier = _Barrier(self.ranks, world.fence_timeout if timeout is None else timeout)
        self._epochs = {(r, id(w)): Epoch(w, r, EXCLUSIVE if w.owner == r else SHARED, active=True)
                        for r in self.ranks for w in self.windows}

    def fence(self, rank: int) -> None:
        tl = self.world.timeline(rank)
        with tl.span("comm"):
            for w in self.windows:
                if w.owner == rank:
                    w._complete(rank)
            delay = self.world.latency.delay(rank)
            if delay:
                time.sleep(delay)
        with tl.span("wait"):
            self._barrier.wait(rank)
        for w in self.windows:
            w._active.add(rank)

    def epoch(self, rank: int, window: Window) -> Epoch:
        return self._epochs[(rank, id(window))]


class World:
    """Registry of ranks, windows, timelines and the latency model."""

    def __init__(self, n_ranks: int, latency: LatencyModel | None = None, fence_timeout: float = 30.0):
        self.n_ranks = n_ranks
        self.latency = latency or LatencyModel()
        self.fence_timeout = fence_timeout
        self.windows: dict = {}
        self.timelines = {r: Timeline(r) for r in range(n_ranks)}
        self._lock = threading.Lock()
        # signalled on every committed put so idle ranks can sleep instead of spin
        self.progress = threading.Condition()
        self.commits = 0

    def notify_progress(self) -> None:
        with self.progress:
            self.commits += 1
            self.progress.notify_all()

    def wait_progress(self, seen: int, timeout: float) -> int:
        """Block until the commit counter moves past ``seen`` or ``timeout`` expires."""
        with self.progress:
            if self.commits == seen:
                self.progress.wait(timeout)
            return self.commits

    def timeline(self, rank: int) -> Timeline:
        return self.timelines[rank]

    def win_create(self, channel, owner: int, size: int) -> Window:
        with self._lock:
            if channel in self.windows:
                raise ValueError(f"window for channel {channel!r} already exists")
            win = Window(self, channel, owner, size)
            self.windows[channel] = win
        return win

    def inject_latency(self, model: LatencyModel) -> None:
        self.latency = model

    def fence_group(self, ranks=None, windows=None, timeout: float | None = None) -> FenceGroup:
        ranks = range(self.n_ranks) if ranks is None else ranks
        windows = self.windows.values() if windows is None else windows
        return FenceGroup(self, ranks, windows, timeout)


# thin functional aliases mirroring the MPI-RMA vocabulary
def win_create(world: World, channel, owner: int, size: int) -> Window:
    return world.win_create(channel, owner, size)


def win_lock(window: Window, rank: int, mode: str = SHARED) -> Epoch:
    return window.lock(rank, mode)


def win_unlock(window: Window, rank: int) -> None:
    window.unlock(rank)


def put(window: Window, payload, epoch: Epoch) -> None:
    window.put(payload, epoch)


def get(window: Window, epoch: Epoch) -> tuple[bytes, int]:
    return window.get(epoch)


def flush(window: Window, epoch: Epoch) -> None:
    window.flush(epoch)


def fence(group: FenceGroup, rank: int) -> None:
    group.fence(rank)


def inject_latency(world: World, model: LatencyModel) -> None:
    world.inject_latency(model)
