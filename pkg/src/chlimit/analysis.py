"""Convergence studies and solution-quality checks.

This module drives the solver to answer the questions the package exists
for: how fast trajectories of the diffusive problem approach the
vanishing-diffusivity limit, whether the solution map is stably Lipschitz
in the data, whether the a-priori quantities that should stay bounded
uniformly in the diffusion coefficient actually do, and whether the
discretization orders are high enough that none of it is an artifact.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .elliptic import star_norm, star_norm_series
from .grid import Grid, ScalarField, TimeGrid, boundary_l2, grad_l2_squared, mean
from .monotone import PowerGraph, zero_perturbation
from .stepper import ProblemData, StepperConfig, Trajectory, solve_trajectory

#: the eight uniform-bound monitors recorded per sweep row
MONITOR_NAMES = (
    "y_linf_h",          # sup_n ||y^n||_L2
    "y_linf_star",       # sup_n dual norm of y^n
    "dy_dt_l2",          # sqrt(sum dt ||(y^{n+1}-y^n)/dt||^2)
    "grad_y_scaled",     # sqrt(delta) * sup_n ||grad y^n||
    "w_l2_v",            # sqrt(sum dt (||grad w^n||^2 + mean(w^n)^2))
    "xi_l2",             # sqrt(sum dt ||xi^n||^2)
    "potential_linf_l1", # sup_n integral of the convex potential of y^n
    "lap_y_scaled",      # delta^{3/4} * sqrt(sum dt ||lap y^n||^2)
)


class CompatibilityError(ValueError):
    """Perturbed data violate a mean-compatibility precondition."""


class StructuralError(ValueError):
    """Objects that cannot be compared (different grids or time grids)."""


def _l2(grid: Grid, flat: np.ndarray) -> float:
    return float(np.sqrt(max(grid.quad_weights @ (flat * flat), 0.0)))


def error_linf_H(a: Trajectory, b: Trajectory) -> float:
    """max over steps of the L2 distance between the order parameters."""
    if a.grid is not b.grid:
        raise StructuralError("trajectories live on different grids")
    if a.timegrid != b.timegrid:
        raise StructuralError("trajectories use different time grids")
    n = min(a.y.shape[0], b.y.shape[0])
    w = a.grid.quad_weights
    diff = (a.y[:n] - b.y[:n]).reshape(n, -1)
    return float(np.sqrt(np.max((diff * diff) @ w)))


def estimate_monitors(
    traj: Trajectory, data: ProblemData, star_tol: float = 1e-10
) -> dict:
    """The uniform-bound quantities of one trajectory, keyed by MONITOR_NAMES."""
    grid = traj.grid
    dt = traj.timegrid.dt
    delta = data.delta
    n_steps = traj.completed_steps
    wq = grid.quad_weights
    L0 = grid.laplacian_zero_flux
    K = grid.stiffness

    Y = traj.y.reshape(n_steps + 1, -1)
    y_l2 = np.sqrt((Y * Y) @ wq)
    y_star = float(np.max(star_norm_series(grid, Y, tol=star_tol)))
    dy = np.diff(Y, axis=0) / dt
    dy_l2sq = (dy * dy) @ wq
    # dirichlet energies in bulk: G[n] = y_n @ K @ y_n
    grad_sq = np.einsum("ij,ij->i", Y, (K @ Y.T).T)
    pot_sup = float(np.max(data.graph.potential(Y) @ wq))
    lap = (L0 @ Y[1:].T).T
    lap_sum = dt * float(np.sum((lap * lap) @ wq))

    W = traj.w[1:].reshape(n_steps, -1)
    w_grad_sq = np.einsum("ij,ij->i", W, (K @ W.T).T)
    w_means = (W @ wq) / grid.volume
    w_sum = dt * float(np.sum(w_grad_sq + w_means ** 2))
    X = traj.xi[1:].reshape(n_steps, -1)
    xi_sum = dt * float(np.sum((X * X) @ wq))

    return {
        "y_linf_h": float(np.max(y_l2)),
        "y_linf_star": y_star,
        "dy_dt_l2": float(np.sqrt(dt * np.sum(dy_l2sq))),
        "grad_y_scaled": math.sqrt(delta) * math.sqrt(max(float(np.max(grad_sq)), 0.0)),
        "w_l2_v": math.sqrt(max(w_sum, 0.0)),
        "xi_l2": math.sqrt(xi_sum),
        "potential_linf_l1": pot_sup,
        "lap_y_scaled": delta ** 0.75 * math.sqrt(lap_sum),
    }


@dataclass(frozen=True)
class SweepRow:
    delta: float
    error: float
    init_error: float
    monitors: dict
    failed: bool = False
    message: str = ""


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple

    def __post_init__(self):
        deltas = [r.delta for r in self.rows]
        if any(b >= a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("sweep deltas must be strictly decreasing")

    @property
    def successful(self) -> tuple:
        return tuple(r for r in self.rows if not r.failed)


@dataclass(frozen=True)
class RateFit:
    p: float
    c: float
    r2: float
    mode: str


def delta_sweep(
    data: ProblemData,
    deltas: Sequence[float],
    tg: TimeGrid,
    cfg: StepperConfig = StepperConfig(),
    workers: int = 1,
    keep_reference: Optional[list] = None,
    monitors: bool = True,
) -> ConvergenceTable:
    """Compare diffusive runs against the zero-diffusivity limit run.

    The reference trajectory is solved once at delta = 0 from y0 itself;
    each row then solves at its delta from the elliptically mollified
    initial state, so the recorded error is exactly the quantity the
    asymptotic estimate bounds.  Rows are independent and can be solved by
    a thread pool.  data.delta is ignored.
    """
    deltas = [float(d) for d in deltas]
    if any(not 0.0 < d < 1.0 for d in deltas):
        raise ValueError("sweep deltas must lie in (0,1)")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("sweep deltas must be strictly decreasing")

    reference = solve_trajectory(data.with_delta(0.0), tg, cfg, mollify=False)
    if not reference.ok:
        raise RuntimeError(
            f"reference (limit) trajectory failed: {reference.error.message}"
        )
    if keep_reference is not None:
        keep_reference.append(reference)

    grid = data.grid
    y0_flat = data.y0.flat

    def run_row(d: float) -> SweepRow:
        traj = solve_trajectory(data.with_delta(d), tg, cfg, mollify=True)
        if not traj.ok:
            return SweepRow(
                delta=d, error=float("nan"), init_error=float("nan"),
                monitors={k: float("nan") for k in MONITOR_NAMES},
                failed=True, message=traj.error.message,
            )
        init_error = _l2(grid, traj.y[0].ravel() - y0_flat)
        err = error_linf_H(traj, reference)
        mons = estimate_monitors(traj, data.with_delta(d)) if monitors else {}
        return SweepRow(delta=d, error=err, init_error=init_error, monitors=mons)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_row, deltas))
    else:
        rows = [run_row(d) for d in deltas]
    return ConvergenceTable(rows=tuple(rows))


def fit_rate(table: ConvergenceTable, against: str = "delta") -> RateFit:
    """Least-squares power-law fit of the sweep errors.

    against="delta" fits error ~ c * delta^p; against="delta_plus_init"
    fits against the combined driver delta^(1/4) + init_error.
    """
    if against not in ("delta", "delta_plus_init"):
        raise ValueError("against must be 'delta' or 'delta_plus_init'")
    rows = [r for r in table.successful if r.error > 0]
    if len(rows) < 4:
        raise StructuralError("rate fit needs at least 4 successful rows")
    if against == "delta":
        x = np.array([r.delta for r in rows])
    else:
        x = np.array([r.delta ** 0.25 + r.init_error for r in rows])
    y = np.array([r.error for r in rows])
    lx, ly = np.log(x), np.log(y)
    p, logc = np.polyfit(lx, ly, 1)
    fitted = p * lx + logc
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(p=float(p), c=float(np.exp(logc)), r2=r2, mode=against)


def bound_constant(table: ConvergenceTable) -> float:
    """Smallest C with error <= C*(delta^(1/4) + init_error) on all rows."""
    rows = table.successful
    if not rows:
        return float("nan")
    return max(r.error / (r.delta ** 0.25 + r.init_error) for r in rows)


@dataclass(frozen=True)
class DependenceResult:
    lhs: float
    rhs_data_norm: float
    ratio: float
    mode: str


def _check_time_slices_close(a, b, times, tol, what) -> float:
    worst = 0.0
    for t in times:
        worst = max(worst, float(np.max(np.abs(a(t) - b(t)))))
        if worst > tol:
            raise CompatibilityError(f"{what} differ at t={t:.6g} (max {worst:.3e})")
    return worst


def continuous_dependence_check(
    base: ProblemData,
    perturbed: ProblemData,
    tg: TimeGrid,
    cfg: StepperConfig = StepperConfig(),
    delta_mode: str = "limit",
    star_tol: float = 1e-10,
) -> DependenceResult:
    """Lipschitz stability of the solution map in the problem data.

    Preconditions (raised as CompatibilityError when violated): the two
    initial states must share their mean value, and the two boundary data
    must share their boundary integral at every step time.  Only y0, g, h
    may differ between base and perturbed.

    delta_mode="limit" solves both problems with zero diffusivity and
    compares states in L2; delta_mode="fixed_delta" keeps base.delta and
    adds the dual-norm and scaled-gradient terms of the diffusive
    stability estimate to the left-hand side.
    """
    if delta_mode not in ("limit", "fixed_delta"):
        raise ValueError("delta_mode must be 'limit' or 'fixed_delta'")
    grid = base.grid
    if perturbed.grid is not grid:
        raise StructuralError("problems live on different grids")
    if base.tau != perturbed.tau or base.graph is not perturbed.graph or (
        base.perturbation is not perturbed.perturbation
    ):
        raise CompatibilityError("tau, graph and perturbation must coincide")
    times = tg.times()
    _check_time_slices_close(base.lam, perturbed.lam, times[:: max(1, len(times) // 8)], 1e-12, "lambda slices")

    m1, m2 = mean(grid, base.y0), mean(grid, perturbed.y0)
    if abs(m1 - m2) > 1e-12 * (1.0 + abs(m1)):
        raise CompatibilityError(
            f"initial means differ: {m1:.15g} vs {m2:.15g}; "
            "the stability estimate requires equal initial mean values"
        )
    bw = grid.boundary_weights
    for t in times[1:]:
        b1 = float(bw @ base.h(t))
        b2 = float(bw @ perturbed.h(t))
        if abs(b1 - b2) > 1e-12 * (1.0 + abs(b1)):
            raise CompatibilityError(
                f"boundary-flux means differ at t={t:.6g}: {b1:.15g} vs {b2:.15g}; "
                "the stability estimate requires equal boundary integrals of h"
            )

    delta = base.delta if delta_mode == "fixed_delta" else 0.0
    t1 = solve_trajectory(base.with_delta(delta), tg, cfg, mollify=False)
    t2 = solve_trajectory(perturbed.with_delta(delta), tg, cfg, mollify=False)
    for t in (t1, t2):
        if not t.ok:
            raise RuntimeError(f"dependence-check trajectory failed: {t.error.message}")

    wq = grid.quad_weights
    diff = (t1.y - t2.y).reshape(t1.y.shape[0], -1)
    sup_h = float(np.sqrt(np.max((diff * diff) @ wq)))
    lhs = sup_h
    if delta_mode == "fixed_delta":
        sup_star = float(np.max(star_norm_series(grid, diff, tol=star_tol)))
        K = grid.stiffness
        grad_acc = tg.dt * float(
            np.sum(np.einsum("ij,ij->i", diff[1:], (K @ diff[1:].T).T))
        )
        lhs = sup_star + math.sqrt(base.tau) * sup_h + math.sqrt(delta) * math.sqrt(max(grad_acc, 0.0))

    rhs = _l2(grid, base.y0.flat - perturbed.y0.flat)
    g_acc = 0.0
    h_acc = 0.0
    for t in times[1:]:
        dg = base.g(t) - perturbed.g(t)
        g_acc += tg.dt * float(wq @ (dg * dg))
        dh = base.h(t) - perturbed.h(t)
        h_acc += tg.dt * float(bw @ (dh * dh))
    rhs += math.sqrt(g_acc) + math.sqrt(h_acc)

    ratio = 0.0 if lhs == 0.0 else (float("inf") if rhs == 0.0 else lhs / rhs)
    return DependenceResult(lhs=lhs, rhs_data_norm=rhs, ratio=ratio, mode=delta_mode)


def mass_balance_series(traj: Trajectory, data: ProblemData) -> np.ndarray:
    """|mean(y^n) - expected mass| per step, where the expected mass follows
    the accumulated boundary flux of h from the initial mean."""
    grid = traj.grid
    dt = traj.timegrid.dt
    bw = grid.boundary_weights
    n = traj.completed_steps
    expected = np.empty(n + 1)
    expected[0] = traj.mass[0]
    acc = 0.0
    for k in range(1, n + 1):
        acc += dt * float(bw @ data.h(traj.times[k]))
        expected[k] = expected[0] + acc / grid.volume
    return np.abs(traj.mass[: n + 1] - expected)


def yosida_refinement_gap(
    data: ProblemData,
    tg: TimeGrid,
    cfg: StepperConfig = StepperConfig(),
) -> float:
    """Trajectory change when the graph-regularization eps is halved.

    Used to confirm that the fixed-eps selection does not pollute the
    delta-rate measurements: the gap must sit below the time-discretization
    error of the sweep.
    """
    from dataclasses import replace

    t1 = solve_trajectory(data, tg, cfg)
    t2 = solve_trajectory(data, tg, replace(cfg, yosida_eps=0.5 * cfg.yosida_eps))
    if not (t1.ok and t2.ok):
        raise RuntimeError("refinement study run failed")
    return error_linf_H(t1, t2)


# ----------------------------------------------------------------------
# manufactured-solution order study (linear problem)


@dataclass(frozen=True)
class MmsResult:
    temporal: tuple          # (dt, error) pairs
    spatial: tuple           # (h, error) pairs
    temporal_order: float
    spatial_order: float


def _mms_problem(n: int, tau: float, delta: float, q: float) -> ProblemData:
    """Linear problem (identity graph, no perturbation) manufactured around
    y(x,t) = exp(-t) cos(pi x) with boundary flux +-q exp(-t) on the ends."""
    grid = Grid((1.0,), (n,))
    x = grid.coords[0]
    y0 = grid.field(np.cos(np.pi * x))
    pi2 = np.pi ** 2
    coef = 1.0 - tau + delta * pi2 - 1.0 / pi2
    cosx = np.cos(np.pi * x).ravel()
    xr = x.ravel()

    def g_fn(t: float) -> np.ndarray:
        return math.exp(-t) * (coef * cosx - q * xr)

    xb = grid.coords[0].ravel()[grid.boundary_indices]
    sign = np.where(xb < 0.5, -1.0, 1.0)

    def h_fn(t: float) -> np.ndarray:
        return q * math.exp(-t) * sign

    return ProblemData.make(
        grid, tau, delta, y0, PowerGraph(1), zero_perturbation(), lam=1.0, g=g_fn, h=h_fn
    )


def _mms_error(data: ProblemData, tg: TimeGrid, cfg: StepperConfig) -> float:
    traj = solve_trajectory(data, tg, cfg)
    if not traj.ok:
        raise RuntimeError(f"manufactured run failed: {traj.error.message}")
    grid = data.grid
    x = grid.coords[0].ravel()
    worst = 0.0
    for k, t in enumerate(traj.times):
        exact = math.exp(-t) * np.cos(np.pi * x)
        worst = max(worst, _l2(grid, traj.y[k].ravel() - exact))
    return worst


def _order(xs: Sequence[float], errs: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(xs), np.log(errs), 1)
    return float(slope)


def mms_study(
    tau: float = 1.0,
    delta: float = 0.01,
    q: float = 0.3,
    T: float = 0.25,
    temporal_steps: Sequence[int] = (8, 16, 32, 64),
    temporal_n: int = 513,
    spatial_n: Sequence[int] = (9, 17, 33),
    spatial_steps: int = 16384,
    cfg: StepperConfig = StepperConfig(),
) -> MmsResult:
    """Observed discretization orders on the linear manufactured problem.

    The temporal sweep refines dt on a fine grid (spatial error floor well
    below the measured errors); the spatial sweep refines h at a dt small
    enough not to mask the second-order space error.
    """
    temporal = []
    data_t = _mms_problem(temporal_n, tau, delta, q)
    for steps in temporal_steps:
        tg = TimeGrid(T, steps)
        temporal.append((tg.dt, _mms_error(data_t, tg, cfg)))
    spatial = []
    for n in spatial_n:
        data_s = _mms_problem(n, tau, delta, q)
        h = data_s.grid.spacing[0]
        spatial.append((h, _mms_error(data_s, TimeGrid(T, spatial_steps), cfg)))
    return MmsResult(
        temporal=tuple(temporal),
        spatial=tuple(spatial),
        temporal_order=_order([d for d, _ in temporal], [e for _, e in temporal]),
        spatial_order=_order([h for h, _ in spatial], [e for _, e in spatial]),
    )
