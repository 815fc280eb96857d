"""Run reports shared by the synchronous and asynchronous drivers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RunReport:
    mode: str
    global_iterations: int = 0
    local_solves: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    # per-rank fraction of wall time spent communicating or waiting
    comm_fractions: dict[int, float] = field(default_factory=dict)
    comm_fraction: float = 0.0
    # (k, ||r||, ||r||/||r0||, omega, t_seconds)
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    converged: bool = False
    final_rel_residual: float = float("nan")
    p: np.ndarray | None = None
    u_global: np.ndarray | None = None
    u_local: list[np.ndarray] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def loc_min(self) -> int:
        return min(self.local_solves) if self.local_solves else 0

    @property
    def loc_max(self) -> int:
        return max(self.local_solves) if self.local_solves else 0

    @property
    def comm_pct(self) -> int:
        return int(round(100.0 * self.comm_fraction))

    def cell(self, with_local: bool | None = None) -> str:
        """Table cell such as ``334[49, 54] & 22.40s[10%]`` or ``25 & 11.72s[30%]``."""
        if with_local is None:
            with_local = self.mode == "async"
        head = f"{self.global_iterations}"
        if with_local:
            head += f"[{self.loc_min}, {self.loc_max}]"
        return f"{head} & {self.wall_time:.2f}s[{self.comm_pct}%]"

    def record(self, k: int, norm: float, rel: float, omega: float, t: float) -> None:
        self.history.append((k, float(norm), float(rel), float(omega), float(t)))
