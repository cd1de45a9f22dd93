"""Command-line front end: run scenarios and serialize results.

Subcommands mirror the run kinds: ``chlimit run|sweep|depcheck|mms
<config>``, each writing CSV/text artifacts into the scenario's output
directory (override with ``--out``).  All floating-point output is printed
with 17 significant digits and LF line endings, so identical configs
produce byte-identical files.  The exit status is 0 iff every enabled
check passed; the first failure is named on stderr.

CHLIMIT_THREADS caps how many sweep rows are solved concurrently.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .analysis import (
    MONITOR_NAMES,
    CompatibilityError,
    bound_constant,
    continuous_dependence_check,
    delta_sweep,
    error_linf_H,
    fit_rate,
    mass_balance_series,
    mms_study,
)
from .config import ConfigError, Scenario, build_perturbed_problem, build_problem, parse_config
from .elliptic import star_norm_series
from .grid import TimeGrid
from .stepper import solve_trajectory


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if not isinstance(v, str) else v for v in row) + "\n")


class _Report:
    """Collects named pass/fail checks and writes report.txt."""

    def __init__(self):
        self.lines = []
        self.failed = []

    def check(self, name: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        suffix = f": {detail}" if detail else ""
        self.lines.append(f"{status} {name}{suffix}")
        if not ok:
            self.failed.append(name)

    def write(self, path: Path) -> None:
        with open(path, "w", newline="\n") as fh:
            for line in self.lines:
                fh.write(line + "\n")

    @property
    def ok(self) -> bool:
        return not self.failed


def _snapshot_steps(total_steps: int, count: int) -> list:
    count = max(2, min(count, total_steps + 1))
    return sorted(set(int(round(k * total_steps / (count - 1))) for k in range(count)))


def _write_snapshots(out: Path, scenario: Scenario, grid, traj) -> None:
    coords = [c.ravel() for c in grid.coords]
    header = ["x", "value"] if grid.dim == 1 else ["x", "y", "value"]
    for n in _snapshot_steps(traj.completed_steps, scenario.snapshots):
        vals = traj.y[n].ravel()
        rows = (list(pt) + [v] for *pt, v in zip(*coords, vals))
        _write_csv(out / f"y_{n:04d}.csv", header, rows)


def _run_single(scenario: Scenario, out: Path, report: _Report) -> None:
    grid = scenario.build_grid()
    tg = scenario.build_timegrid()
    data = build_problem(scenario, grid)
    traj = solve_trajectory(data, tg, scenario.stepper, mollify=scenario.mollify)

    stars = star_norm_series(grid, traj.y.reshape(traj.y.shape[0], -1))
    wq = grid.quad_weights
    flat = traj.y.reshape(traj.y.shape[0], -1)
    l2 = np.sqrt((flat * flat) @ wq)
    linf = np.max(np.abs(flat), axis=1)
    iters = np.concatenate([[0], traj.newton_iters])
    rows = zip(traj.times, traj.mass, traj.energy, l2, stars, linf, iters)
    _write_csv(
        out / "trajectory.csv",
        ["t", "mass", "energy", "l2_y", "star_y", "linf_y", "newton_iters"],
        ((t, m, e, a, s, f, int(i)) for t, m, e, a, s, f, i in rows),
    )
    _write_snapshots(out, scenario, grid, traj)

    report.check(
        "trajectory completed",
        traj.ok,
        "" if traj.ok else traj.error.message,
    )
    if traj.completed_steps > 0:
        balance = mass_balance_series(traj, data)
        tol = 1e-10 * (1.0 + float(np.max(np.abs(traj.y))))
        report.check(
            "mass balance",
            bool(np.max(balance) <= tol),
            f"max deviation {np.max(balance):.3e}, tolerance {tol:.3e}",
        )
    report.check("fields finite", bool(np.all(np.isfinite(traj.y))))


def _run_sweep(scenario: Scenario, out: Path, report: _Report) -> None:
    grid = scenario.build_grid()
    tg = scenario.build_timegrid()
    data = build_problem(scenario, grid)
    workers = int(os.environ.get("CHLIMIT_THREADS", "1"))
    keep = []
    table = delta_sweep(
        data, scenario.deltas, tg, scenario.stepper, workers=workers, keep_reference=keep
    )

    _write_csv(
        out / "sweep.csv",
        ["delta", "error", "init_error", *MONITOR_NAMES],
        (
            [r.delta, r.error, r.init_error] + [r.monitors.get(k, float("nan")) for k in MONITOR_NAMES]
            for r in table.rows
        ),
    )

    ok_rows = table.successful
    report.check(
        "all sweep rows solved",
        len(ok_rows) == len(table.rows),
        f"{len(ok_rows)}/{len(table.rows)} rows",
    )

    fit = fit_rate(table, scenario.fit_mode)
    cbound = bound_constant(table)
    with open(out / "ratefit.txt", "w", newline="\n") as fh:
        fh.write(f"p = {_fmt(fit.p)}\n")
        fh.write(f"c = {_fmt(fit.c)}\n")
        fh.write(f"r2 = {_fmt(fit.r2)}\n")
        fh.write(f"mode = {fit.mode}\n")
        fh.write(f"bound_constant = {_fmt(cbound)}\n")

    errors = [r.error for r in ok_rows]
    report.check(
        "errors decrease with delta",
        all(b < a for a, b in zip(errors, errors[1:])),
        " ".join(f"{e:.3e}" for e in errors),
    )
    report.check("fitted rate p >= 0.25", fit.p >= 0.25, f"p = {fit.p:.4f}")
    report.check("fit quality r2 >= 0.95", fit.r2 >= 0.95, f"r2 = {fit.r2:.5f}")

    worst = 0.0
    for k in MONITOR_NAMES:
        v0 = ok_rows[0].monitors[k]
        vn = ok_rows[-1].monitors[k]
        if v0 > 0:
            worst = max(worst, vn / v0)
    report.check(
        "monitors grow < 2x toward small delta", worst < 2.0, f"worst growth {worst:.3f}"
    )

    ref = keep[0]
    balance = mass_balance_series(ref, data.with_delta(0.0))
    tol = 1e-10 * (1.0 + float(np.max(np.abs(ref.y))))
    report.check(
        "reference mass balance",
        bool(np.max(balance) <= tol),
        f"max deviation {np.max(balance):.3e}",
    )


def _run_depcheck(scenario: Scenario, out: Path, report: _Report) -> None:
    grid = scenario.build_grid()
    tg = scenario.build_timegrid()
    base = build_problem(scenario, grid)
    results = []
    for scale in (1.0, 0.5):
        pert = build_perturbed_problem(scenario, base, scale=scale)
        results.append(
            continuous_dependence_check(
                base, pert, tg, scenario.stepper, delta_mode=scenario.dep_mode
            )
        )
    _write_csv(
        out / "depcheck.csv",
        ["lhs", "rhs", "ratio"],
        ((r.lhs, r.rhs_data_norm, r.ratio) for r in results),
    )
    full, half = results
    report.check(
        "dependence ratio finite",
        np.isfinite(full.ratio) and full.ratio > 0,
        f"ratio = {full.ratio:.4f}",
    )
    change = abs(half.ratio - full.ratio) / full.ratio if full.ratio > 0 else float("inf")
    report.check(
        "ratio stable under perturbation halving",
        change < 0.2,
        f"relative change {change:.4f}",
    )


def _run_mms(scenario: Scenario, out: Path, report: _Report) -> None:
    res = mms_study(
        tau=scenario.tau,
        delta=scenario.delta if scenario.delta > 0 else 0.01,
        T=scenario.T,
        temporal_steps=scenario.temporal_steps,
        temporal_n=scenario.temporal_n,
        spatial_n=scenario.spatial_n,
        spatial_steps=scenario.spatial_steps,
        cfg=scenario.stepper,
    )
    rows = [("temporal", d, e) for d, e in res.temporal] + [
        ("spatial", h, e) for h, e in res.spatial
    ]
    _write_csv(out / "mms.csv", ["study", "resolution", "error"], rows)
    with open(out / "ratefit.txt", "w", newline="\n") as fh:
        fh.write(f"temporal_order = {_fmt(res.temporal_order)}\n")
        fh.write(f"spatial_order = {_fmt(res.spatial_order)}\n")
    report.check(
        "temporal order >= 0.9", res.temporal_order >= 0.9, f"{res.temporal_order:.3f}"
    )
    report.check(
        "spatial order >= 1.9", res.spatial_order >= 1.9, f"{res.spatial_order:.3f}"
    )


def run_scenario(scenario: Scenario, out_dir: Optional[str] = None) -> int:
    """Execute a scenario, write its artifacts, return the exit status."""
    out = Path(out_dir if out_dir is not None else scenario.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = _Report()
    runner = {
        "single": _run_single,
        "sweep": _run_sweep,
        "depcheck": _run_depcheck,
        "mms": _run_mms,
    }[scenario.kind]
    try:
        runner(scenario, out, report)
    except CompatibilityError as exc:
        report.check("data compatibility preconditions", False, str(exc))
    report.write(out / "report.txt")
    if not report.ok:
        print(f"chlimit: check failed: {report.failed[0]}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="chlimit",
        description="viscous Cahn-Hilliard solver and vanishing-diffusivity checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, kind in (
        ("run", "single"),
        ("sweep", "sweep"),
        ("depcheck", "depcheck"),
        ("mms", "mms"),
    ):
        p = sub.add_parser(cmd, help=f"execute a '{kind}' scenario")
        p.add_argument("config", help="path to the scenario config file")
        p.add_argument("--out", default=None, help="override the output directory")
        p.set_defaults(kind=kind)
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"chlimit: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        scenario = parse_config(text, name=Path(args.config).stem)
    except ConfigError as exc:
        print(f"chlimit: config error: {exc}", file=sys.stderr)
        return 2
    if scenario.kind != args.kind:
        print(
            f"chlimit: config has run.kind = {scenario.kind}, "
            f"but the '{args.command}' subcommand expects '{args.kind}'",
            file=sys.stderr,
        )
        return 2
    return run_scenario(scenario, out_dir=args.out)


if __name__ == "__main__":
    sys.exit(main())
