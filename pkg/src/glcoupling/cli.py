"""Scenario files, experiment sweeps and CSV/text report emission.

A scenario file is a small INI dialect::

    # 8 patches, sync Aitken
    [grid]
    nx = 2
    ny = 2
    nz = 2
    [physics]
    kind = elasticity
    [run]
    mode = aitken
    [latency]
    slowdown = 3:10

Every error names the offending line.  ``glcoupling run|sweep-ranks|sweep-imbalance``
is the command-line entry point.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

from glcoupling import asyncomm as rma
from glcoupling.coupling import build_system, run_synchronous
from glcoupling.fem import Physics
from glcoupling.mesh import ConfigurationError, GridSpec, generate_patch_grid
from glcoupling.report import RunReport
from glcoupling.runtime import assign_patches, run_async, run_sync_distributed

RESULT_COLUMNS = (
    "scenario_id",
    "mode",
    "ranks",
    "iter_global",
    "loc_min",
    "loc_max",
    "wall_time_s",
    "comm_pct",
    "final_rel_residual",
    "converged",
)
HISTORY_COLUMNS = ("k", "rel_residual", "t_seconds")
MODES = ("aitken", "fixed", "submodeling", "async")
REQUIRED = ("nx", "ny", "nz")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        self.message = message
        super().__init__(f"line {line}: {message}" if line else message)


# -- value codecs ------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _delay(text: str):
    # "5" or "2..8" (uniform range, ms)
    lo, sep, hi = text.strip().partition("..")
    value = (float(lo), float(hi)) if sep else float(lo)
    if min(value if sep else (value,)) < 0 or (sep and value[0] > value[1]):
        raise ValueError(f"delay must be a non-negative value or lo-hi range, got {text!r}")
    return value


def _fmt_delay(v) -> str:
    return f"{v[0]!r}..{v[1]!r}" if isinstance(v, tuple) else repr(float(v))


def _rank_map(text: str, value) -> dict:
    # "1:10, 3:2..8"
    out = {}
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        rank, _, v = item.partition(":")
        if not _:
            raise ValueError(f"expected rank:value, got {item!r}")
        out[int(rank)] = value(v)
    return out


def _fmt_rank_map(m: dict, fmt) -> str:
    return ", ".join(f"{r}:{fmt(v)}" for r, v in sorted(m.items()))


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "auto", "all") else conv(text)

    return parse


# -- scenario ----------------------------------------------------------------


@dataclass(frozen=True)
class LatencySpec:
    delay_ms: float | tuple[float, float] = 0.0
    rank_delay_ms: dict = field(default_factory=dict)
    slowdown: dict = field(default_factory=dict)
    stalled: tuple[int, ...] = ()
    seed: int = 0

    def model(self) -> rma.LatencyModel:
        return rma.LatencyModel(
            delay_ms=self.delay_ms,
            rank_delay_ms=dict(self.rank_delay_ms),
            slowdown=dict(self.slowdown),
            stalled=frozenset(self.stalled),
            seed=self.seed,
        )

    def describe(self) -> str:
        parts = []
        if self.delay_ms:
            parts.append(f"delay {_fmt_delay(self.delay_ms)} ms")
        if self.rank_delay_ms:
            parts.append("rank delay " + _fmt_rank_map(self.rank_delay_ms, _fmt_delay))
        if self.slowdown:
            parts.append("slowdown " + _fmt_rank_map(self.slowdown, repr))
        if self.stalled:
            parts.append(f"stalled {list(self.stalled)}")
        return ", ".join(parts) or "no injected latency"


@dataclass(frozen=True)
class Scenario:
    nx: int
    ny: int
    nz: int
    patch_side: float = 1.0
    h_global: float = 0.5
    h_fine: float = 0.125
    patched_cells: tuple[int, ...] | None = None
    conforming_interfaces: bool = False
    kind: str = "poisson"
    poisson_ratio: float = 0.3
    contrast: float = 100.0
    inclusion_radius: float | None = None  # None: patch_side / 4
    inclusion_offset: tuple[float, ...] = ()
    scenario_id: str = "scenario"
    mode: str = "aitken"
    omega: float | None = None  # None: 1.0 for sync modes, 0.5 for async
    tol: float = 1e-7
    max_iterations: int = 500
    ranks: int | None = None  # None: one rank per patch plus the global rank
    policy: str = "block"
    seed: int = 0
    solver: str = "direct"
    output: str = "results"
    latency: LatencySpec = field(default_factory=LatencySpec)

    def grid(self) -> GridSpec:
        return GridSpec(
            self.nx, self.ny, self.nz, self.patch_side, self.h_global, self.h_fine,
            None if self.patched_cells is None else frozenset(self.patched_cells),
            self.conforming_interfaces,
        )

    @property
    def n_patches(self) -> int:
        return len(self.grid().cells)

    @property
    def n_ranks(self) -> int:
        return self.ranks if self.ranks is not None else self.n_patches + 1

    @property
    def relaxation(self) -> float:
        if self.omega is not None:
            return self.omega
        return 0.5 if self.mode == "async" else 1.0

    def validate(self) -> None:
        def check(ok, key, message):
            if not ok:
                raise ConfigError(message, key=key)

        check(self.kind in ("poisson", "elasticity"), "kind", f"kind must be poisson or elasticity, got {self.kind!r}")
        check(self.mode in MODES, "mode", f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        check(self.tol > 0, "tol", f"tol must be positive, got {self.tol!r}")
        check(self.contrast > 0, "contrast", f"contrast must be positive, got {self.contrast!r}")
        check(self.omega is None or 0 < self.omega < 2, "omega", f"omega must lie in (0, 2), got {self.omega!r}")
        check(self.max_iterations >= 1, "max_iterations", "max_iterations must be >= 1")
        check(self.policy in ("block", "random"), "policy", f"policy must be block or random, got {self.policy!r}")
        check(self.solver in ("direct", "cg"), "solver", f"solver must be direct or cg, got {self.solver!r}")
        check(self.inclusion_radius is None or self.inclusion_radius > 0, "inclusion_radius",
              "inclusion_radius must be positive")
        try:
            grid = self.grid()
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from None
        n = len(grid.cells)
        check(self.ranks is None or 2 <= self.ranks <= n + 1, "ranks",
              f"ranks must be between 2 and {n + 1}, got {self.ranks}")


# (section, key) -> (Scenario field, parser, formatter)
_SCHEMA = {
    ("grid", "nx"): ("nx", int, str),
    ("grid", "ny"): ("ny", int, str),
    ("grid", "nz"): ("nz", int, str),
    ("grid", "patch_side"): ("patch_side", float, repr),
    ("grid", "h_global"): ("h_global", float, repr),
    ("grid", "h_fine"): ("h_fine", float, repr),
    ("grid", "patched_cells"): ("patched_cells", _optional(_int_list),
                                lambda v: "all" if v is None else ", ".join(map(str, v))),
    ("grid", "conforming_interfaces"): ("conforming_interfaces", _bool, lambda v: str(v).lower()),
    ("physics", "kind"): ("kind", str, str),
    ("physics", "poisson_ratio"): ("poisson_ratio", float, repr),
    ("physics", "contrast"): ("contrast", float, repr),
    ("physics", "inclusion_radius"): ("inclusion_radius", _optional(float),
                                      lambda v: "auto" if v is None else repr(v)),
    ("physics", "inclusion_offset"): ("inclusion_offset", _float_list, lambda v: ", ".join(map(repr, v))),
    ("run", "id"): ("scenario_id", str, str),
    ("run", "mode"): ("mode", str, str),
    ("run", "omega"): ("omega", _optional(float), lambda v: "auto" if v is None else repr(v)),
    ("run", "tol"): ("tol", float, repr),
    ("run", "max_iterations"): ("max_iterations", int, str),
    ("run", "ranks"): ("ranks", _optional(int), lambda v: "auto" if v is None else str(v)),
    ("run", "policy"): ("policy", str, str),
    ("run", "seed"): ("seed", int, str),
    ("run", "solver"): ("solver", str, str),
    ("run", "output"): ("output", str, str),
}

_LATENCY = {
    "delay_ms": (_delay, _fmt_delay),
    "rank_delay_ms": (lambda t: _rank_map(t, _delay), lambda m: _fmt_rank_map(m, _fmt_delay)),
    "slowdown": (lambda t: _rank_map(t, float), lambda m: _fmt_rank_map(m, repr)),
    "stalled": (_int_list, lambda v: ", ".join(map(str, v))),
    "seed": (int, str),
}


def _lines(text: str):
    """Yield (lineno, section, key, value) for each assignment."""
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            yield no, section, None, None
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        if section is None:
            raise ConfigError(f"key {key.strip()!r} appears before any section", no)
        yield no, section, key.strip().lower(), value.strip()


def _latency_from(items) -> LatencySpec:
    values = {}
    for no, key, value in items:
        if key not in _LATENCY:
            raise ConfigError(f"unknown key {key!r} in [latency]; expected one of {', '.join(_LATENCY)}", no)
        try:
            values[key] = _LATENCY[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", no) from None
    if "stalled" in values:
        values["stalled"] = tuple(values["stalled"])
    return LatencySpec(**values)


def parse_config(text: str) -> Scenario:
    """Build a validated :class:`Scenario` from config text."""
    values: dict = {}
    seen: dict = {}
    latency_items = []
    for no, section, key, value in _lines(text):
        if key is None:
            if section not in ("grid", "physics", "run", "latency"):
                raise ConfigError(f"unknown section [{section}]", no)
            continue
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[section, key]})", no)
        seen[section, key] = no
        if section == "latency":
            latency_items.append((no, key, value))
            continue
        entry = _SCHEMA.get((section, key))
        if entry is None:
            known = sorted(k for s, k in _SCHEMA if s == section)
            raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {', '.join(known)}", no)
        name, conv, _ = entry
        try:
            values[name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", no) from None
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s) in [grid]: {', '.join(missing)}")
    values["latency"] = _latency_from(latency_items)
    scenario = Scenario(**values)
    try:
        scenario.validate()
    except ConfigError as exc:
        lines = [no for (_, key), no in seen.items() if key == exc.key or (key == "id" and exc.key == "scenario_id")]
        raise ConfigError(exc.message, lines[0] if lines else None, exc.key) from None
    return scenario


def serialize(scenario: Scenario) -> str:
    out = []
    section = None
    for (sec, key), (name, _, fmt) in _SCHEMA.items():
        if sec != section:
            out.append(f"[{sec}]")
            section = sec
        out.append(f"{key} = {fmt(getattr(scenario, name))}")
    out.append("[latency]")
    lat = scenario.latency
    for key, (_, fmt) in _LATENCY.items():
        v = getattr(lat, key)
        if v or key == "delay_ms":
            out.append(f"{key} = {fmt(v)}")
    return "\n".join(out) + "\n"


def load_config(path) -> Scenario:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- execution ---------------------------------------------------------------


def build(scenario: Scenario):
    decomp = generate_patch_grid(scenario.grid())
    physics = Physics(scenario.kind, poisson_ratio=scenario.poisson_ratio)
    return build_system(
        decomp, physics,
        contrast=scenario.contrast,
        radius=scenario.inclusion_radius,
        center_offset=scenario.inclusion_offset or None,
        solver=scenario.solver,
    )


def execute(scenario: Scenario, system=None, wall_budget: float = 600.0) -> RunReport:
    """Run the scenario's driver and return its report (nothing is written)."""
    system = build(scenario) if system is None else system
    latency = scenario.latency.model()
    if scenario.mode == "async":
        assignment = assign_patches(system.n_patches, scenario.n_ranks, scenario.policy, scenario.seed)
        return run_async(system, assignment, omega=scenario.relaxation, tol=scenario.tol,
                         max_iterations=max(scenario.max_iterations, 10 * system.n_patches),
                         latency=latency, wall_budget=wall_budget)
    if scenario.ranks is None and latency.is_zero() and not latency.slowdown and not latency.stalled:
        report = run_synchronous(system, scenario.mode, scenario.relaxation, scenario.tol,
                                 scenario.max_iterations)
        report.comm_fraction = 0.0
        return report
    assignment = assign_patches(system.n_patches, scenario.n_ranks, scenario.policy, scenario.seed)
    return run_sync_distributed(system, assignment, scenario.mode, scenario.relaxation, scenario.tol,
                                scenario.max_iterations, latency)


def result_row(scenario: Scenario, report: RunReport) -> dict:
    return {
        "scenario_id": scenario.scenario_id,
        "mode": scenario.mode,
        "ranks": scenario.n_ranks,
        "iter_global": report.global_iterations,
        "loc_min": report.loc_min,
        "loc_max": report.loc_max,
        "wall_time_s": f"{report.wall_time:.6f}",
        "comm_pct": report.comm_pct,
        "final_rel_residual": f"{report.final_rel_residual:.6e}",
        "converged": str(bool(report.converged)).lower(),
    }


def append_rows(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if fresh:
            writer.writeheader()
        writer.writerows(rows)


def write_history(path: Path, report: RunReport) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for k, _norm, rel, _omega, t in report.history:
            writer.writerow((k, f"{rel:.6e}", f"{t:.6f}"))


def _tag(scenario: Scenario) -> str:
    return f"{scenario.scenario_id}_{scenario.mode}_r{scenario.n_ranks}"


def run_scenario(scenario: Scenario, out_dir=None, system=None, wall_budget: float = 600.0):
    """Run one scenario and write results.csv, a history CSV and a text report.

    Returns ``(row, report)``.  Non-convergence is recorded in the row, not raised.
    """
    out = Path(out_dir if out_dir is not None else scenario.output)
    report = execute(scenario, system, wall_budget)
    row = result_row(scenario, report)
    append_rows(out / "results.csv", [row])
    write_history(out / f"history_{_tag(scenario)}.csv", report)
    text = [
        f"scenario {scenario.scenario_id}: {scenario.kind}, {scenario.n_patches} patches, "
        f"mode {scenario.mode}, {scenario.n_ranks} ranks, omega {scenario.relaxation}",
        f"latency: {scenario.latency.describe()}",
        "#iter. glob. counts global solves; #loc. sol. counts fine solves per patch",
        f"converged: {str(report.converged).lower()} (final relative residual {report.final_rel_residual:.3e})",
        report.cell(),
        *report.notes,
    ]
    (out / f"report_{_tag(scenario)}.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    return row, report


# -- sweeps ------------------------------------------------------------------


def _cell(scenario: Scenario, system, out: Path, wall_budget: float):
    try:
        row, report = run_scenario(scenario, out, system, wall_budget)
        return report, None
    except Exception as exc:  # recorded, the sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def sweep_ranks(scenario: Scenario, ranks_list, out_dir=None, wall_budget: float = 600.0) -> str:
    """Sync-Aitken and async for every rank count, as one table."""
    out = Path(out_dir if out_dir is not None else scenario.output)
    system = build(scenario)
    header = f"{'#proc':>6} | {'sync (aitken)':<24} | {'async':<32}"
    lines = [f"# {scenario.scenario_id}: {scenario.kind}, {system.n_patches} patches", header, "-" * len(header)]
    for ranks in ranks_list:
        cells = []
        for mode in ("aitken", "async"):
            sc = dataclasses.replace(scenario, mode=mode, ranks=ranks,
                                     omega=scenario.omega if mode == "async" else None)
            try:
                sc.validate()
                report, err = _cell(sc, system, out, wall_budget)
            except ConfigError as exc:
                report, err = None, str(exc)
            cells.append(report.cell() if report is not None else f"failed ({err})")
        lines.append(f"{ranks:>6} | {cells[0]:<24} | {cells[1]:<32}")
    table = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_ranks_{scenario.scenario_id}.txt").write_text(table, encoding="utf-8")
    return table


def parse_profiles(text: str) -> dict[str, LatencySpec]:
    """``[name]`` sections holding ``[latency]`` keys."""
    profiles: dict[str, list] = {}
    current = None
    for no, section, key, value in _lines(text):
        if key is None:
            if section in profiles:
                raise ConfigError(f"duplicate profile [{section}]", no)
            profiles[section] = []
            current = section
            continue
        profiles[current].append((no, key, value))
    if not profiles:
        raise ConfigError("no latency profiles defined")
    return {name: _latency_from(items) for name, items in profiles.items()}


def sweep_imbalance(scenario: Scenario, profiles: dict[str, LatencySpec], out_dir=None,
                    wall_budget: float = 600.0) -> str:
    """Sync-Aitken against relaxed async for each latency profile."""
    out = Path(out_dir if out_dir is not None else scenario.output)
    system = build(scenario)
    blocks = []
    for name, latency in profiles.items():
        sync_sc = dataclasses.replace(scenario, mode="aitken", omega=None, latency=latency,
                                      ranks=scenario.n_ranks, scenario_id=f"{scenario.scenario_id}-{name}")
        async_sc = dataclasses.replace(sync_sc, mode="async", omega=scenario.omega)
        sync, err_s = _cell(sync_sc, system, out, wall_budget)
        asy, err_a = _cell(async_sc, system, out, wall_budget)

        def fmt(r, err, f):
            return f(r) if r is not None else f"failed ({err})"

        rows = [
            ("Time(s)", fmt(sync, err_s, lambda r: f"{r.wall_time:.2f}"), fmt(asy, err_a, lambda r: f"{r.wall_time:.2f}")),
            ("Sync. #iter. glob.", fmt(sync, err_s, lambda r: str(r.global_iterations)), "-"),
            ("Async. #iter. glob.", "-", fmt(asy, err_a, lambda r: str(r.global_iterations))),
            ("Async. #loc. sol. [min, max]", "-", fmt(asy, err_a, lambda r: f"[{r.loc_min} - {r.loc_max}]")),
            ("Comm. time", fmt(sync, err_s, lambda r: f"{r.comm_pct}%"), fmt(asy, err_a, lambda r: f"{r.comm_pct}%")),
        ]
        head = (f"# profile {name} (emulation: {latency.describe()}), "
                f"{system.n_patches} patches on {sync_sc.n_ranks} ranks; #iter. glob. counts global solves")
        width = max(len(r[0]) for r in rows)
        body = [head, f"{'':<{width}} | {'Sync (aitken)':>14} | {'Async':>14}"]
        body += [f"{a:<{width}} | {b:>14} | {c:>14}" for a, b, c in rows]
        blocks.append("\n".join(body))
    table = "\n\n".join(blocks) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_imbalance_{scenario.scenario_id}.txt").write_text(table, encoding="utf-8")
    return table


# -- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glcoupling", description="Global/local coupling experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", type=Path)
    common.add_argument("--out", type=Path, default=None, help="output directory (default: [run] output)")
    common.add_argument("--seed", type=int, default=None, help="assignment and latency seed")
    common.add_argument("--max-wall-seconds", type=float, default=600.0,
                        help="wall budget per asynchronous run")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one scenario")
    p = sub.add_parser("sweep-ranks", parents=[common], help="sync vs async over rank counts")
    p.add_argument("--ranks", required=True, help="comma separated, e.g. 9,17,33,65")
    p = sub.add_parser("sweep-imbalance", parents=[common], help="sync vs async per latency profile")
    p.add_argument("--profiles", type=Path, required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        scenario = load_config(args.config)
        if args.seed is not None:
            scenario = dataclasses.replace(
                scenario, seed=args.seed, latency=dataclasses.replace(scenario.latency, seed=args.seed))
        out = args.out if args.out is not None else Path(scenario.output)
        if args.command == "run":
            _, report = run_scenario(scenario, out, wall_budget=args.max_wall_seconds)
            print(report.cell())
        elif args.command == "sweep-ranks":
            try:
                ranks = [int(r) for r in args.ranks.split(",") if r.strip()]
            except ValueError:
                raise ConfigError(f"--ranks must be comma separated integers, got {args.ranks!r}") from None
            print(sweep_ranks(scenario, ranks, out, args.max_wall_seconds), end="")
        else:
            profiles = parse_profiles(args.profiles.read_text(encoding="utf-8"))
            print(sweep_imbalance(scenario, profiles, out, args.max_wall_seconds), end="")
    except (ConfigError, ConfigurationError) as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
