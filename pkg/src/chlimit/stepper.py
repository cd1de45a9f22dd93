"""Implicit time integration of the viscous Cahn-Hilliard system.

One backward-Euler scheme covers both regimes: the diffusive problem with
coefficient delta > 0 and its delta = 0 limit, where the viscous term
tau * dy/dt alone keeps the update well posed.  Each step solves

    (y - y_old)/dt = lap(w, flux = h(t)),
    w = tau*(y - y_old)/dt - delta*lap0(y) + beta_eps(y) + lam(t)*pi(y) - g(t)

for y by a damped Newton iteration with analytic Jacobian; w and the graph
selection xi = beta_eps(y) are recomputed from the converged state.  The
graph nonlinearity is handled through the Yosida approximation at a fixed
small eps, so xi is an eps-accurate selection of the multivalued graph.

Because the discrete divergence theorem is exact, integrating the first
equation forces the mean of y to follow the boundary-flux balance exactly;
after each Newton solve the mean is snapped onto that balance (a shift at
the size of the Newton residual times dt) so the identity holds to
round-off over arbitrarily many steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elliptic import SolverError, mollify_initial
from .grid import (
    BoundaryTrace,
    Grid,
    ScalarField,
    TimeGrid,
    boundary_integral,
    grad_l2_squared,
    mean,
)
from .monotone import LipschitzPerturbation, MonotoneGraph

TimeSlice = Callable[[float], np.ndarray]


class StepError(RuntimeError):
    """Newton failed to reach the residual tolerance for one step."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class StepFailure:
    step_index: int
    time: float
    residual: float
    message: str


def _normalize_field_slice(grid: Grid, spec) -> TimeSlice:
    if callable(spec):
        return lambda t: np.broadcast_to(
            np.asarray(spec(t), dtype=float), grid.shape
        ).ravel()
    if isinstance(spec, ScalarField):
        vals = spec.flat.copy()
        return lambda t: vals
    arr = np.broadcast_to(np.asarray(spec, dtype=float), grid.shape).ravel().copy()
    return lambda t: arr


def _normalize_trace_slice(grid: Grid, spec) -> TimeSlice:
    nb = grid.boundary_count
    if callable(spec):
        return lambda t: np.broadcast_to(np.asarray(spec(t), dtype=float), (nb,)).ravel()
    if isinstance(spec, BoundaryTrace):
        vals = spec.values.copy()
        return lambda t: vals
    arr = np.broadcast_to(np.asarray(spec, dtype=float), (nb,)).ravel().copy()
    return lambda t: arr


@dataclass(frozen=True)
class ProblemData:
    """All data of one initial-boundary value problem.

    lam, g (nodal) and h (boundary) are time slices: callables mapping a
    time to flat value arrays.  ``make`` accepts constants, fields or
    callables and normalizes them.
    """

    grid: Grid
    tau: float
    delta: float
    y0: ScalarField
    graph: MonotoneGraph
    perturbation: LipschitzPerturbation
    lam: TimeSlice
    g: TimeSlice
    h: TimeSlice

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0,1)")
        if self.y0.grid is not self.grid:
            raise ValueError("y0 must live on the problem grid")

    @staticmethod
    def make(grid, tau, delta, y0, graph, perturbation, lam=1.0, g=0.0, h=0.0):
        return ProblemData(
            grid=grid,
            tau=float(tau),
            delta=float(delta),
            y0=y0,
            graph=graph,
            perturbation=perturbation,
            lam=_normalize_field_slice(grid, lam),
            g=_normalize_field_slice(grid, g),
            h=_normalize_trace_slice(grid, h),
        )

    def with_delta(self, delta: float) -> "ProblemData":
        return replace(self, delta=float(delta))


@dataclass(frozen=True)
class StepperConfig:
    newton_tol: float = 1e-10
    newton_max_iter: int = 30
    yosida_eps: float = 1e-6
    #: cap on the normwise backward error of each Newton linear solve
    linear_tol: float = 1e-12

    def __post_init__(self):
        if min(self.newton_tol, self.yosida_eps, self.linear_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.yosida_eps > 1e-2:
            raise ValueError("yosida_eps must be <= 1e-2")


@dataclass(frozen=True)
class Trajectory:
    """Fields and per-step diagnostics of one run.

    ``w[0]`` is undefined (the scheme only produces the chemical potential
    at step endpoints) and stored as NaN.  On failure the arrays are
    truncated after the last completed step and ``error`` is set.
    """

    grid: Grid
    timegrid: TimeGrid
    times: np.ndarray
    y: np.ndarray
    w: np.ndarray
    xi: np.ndarray
    mass: np.ndarray
    energy: np.ndarray
    newton_iters: np.ndarray
    residuals: np.ndarray
    yosida_eps: float
    error: Optional[StepFailure] = None

    @property
    def completed_steps(self) -> int:
        return self.y.shape[0] - 1

    @property
    def ok(self) -> bool:
        return self.error is None

    def y_field(self, n: int) -> ScalarField:
        return self.grid.field(self.y[n])

    def w_field(self, n: int) -> ScalarField:
        if n == 0:
            raise ValueError("the chemical potential is undefined at step 0")
        return self.grid.field(self.w[n])

    def xi_field(self, n: int) -> ScalarField:
        return self.grid.field(self.xi[n])


def _to_banded(M: sp.spmatrix, n: int, bw: int = 2) -> np.ndarray:
    """ab[bw - d, j] = M[j - d, j] (solve_banded layout); M must fit in bw."""
    ab = np.zeros((2 * bw + 1, n))
    Md = sp.dia_matrix(M)
    for off, row in zip(Md.offsets, Md.data):
        if abs(int(off)) > bw:
            if np.any(row):
                raise ValueError("matrix bandwidth exceeds the banded layout")
            continue
        ab[bw - int(off), :] = row
    return ab


def _banded_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = ab[2] * x
    out[:-1] += ab[1, 1:] * x[1:]
    out[:-2] += ab[0, 2:] * x[2:]
    out[1:] += ab[3, :-1] * x[:-1]
    out[2:] += ab[4, :-2] * x[:-2]
    return out


class _Workspace:
    """Per-solve cache of operators and data closures (not shared)."""

    def __init__(self, data: ProblemData, cfg: StepperConfig):
        grid = data.grid
        self.grid = grid
        self.data = data
        self.cfg = cfg
        self.L0 = grid.laplacian_zero_flux
        self.L0sq = (self.L0 @ self.L0).tocsr()
        self.Binj = grid.flux_injection
        self.wq = grid.quad_weights
        self.volume = grid.volume
        self.ident = sp.identity(grid.node_count, format="csr")
        if grid.dim == 1:
            n = grid.node_count
            self.b_L0 = _to_banded(self.L0, n)
            self.b_L0sq = _to_banded(self.L0sq, n)
            self.b_I = np.zeros((5, n))
            self.b_I[2, :] = 1.0

    def weighted_l2(self, flat: np.ndarray) -> float:
        return float(np.sqrt(max(self.wq @ (flat * flat), 0.0)))

    def chemical_potential(self, y, y_old, dt, lam, gsrc):
        d = self.data
        out = d.tau * (y - y_old) / dt
        if d.delta != 0.0:
            out -= d.delta * (self.L0 @ y)
        out += d.graph.yosida(self.cfg.yosida_eps, y)
        out += lam * d.perturbation(y)
        out -= gsrc
        return out

    def residual(self, y, y_old, dt, lam, gsrc, flux_src):
        """Update-equation residual (y - y_old) - dt*(lap(w) + flux source).

        This is dt times the rate form.  Measuring the residual in y-units
        keeps the tolerance attainable: the rate form carries a factor
        tau/(dt*h^2) that amplifies the double-precision quantization of y
        itself above any reasonable tolerance.
        """
        w = self.chemical_potential(y, y_old, dt, lam, gsrc)
        return (y - y_old) - dt * (self.L0 @ w + flux_src), w

    def _nonlinearity_slope(self, y, lam):
        d = self.data
        return d.graph.yosida_derivative(self.cfg.yosida_eps, y) + lam * d.perturbation.prime(y)

    def newton_direction(self, y, dt, lam, rhs):
        """Solve (I - tau*L0 + dt*delta*L0^2 - dt*L0*diag(s)) dy = rhs.

        Also records the infinity norm of the operator (self.last_opnorm),
        which bounds how far below round-off the nonlinear residual can be
        driven at all: quantizing y at machine precision already perturbs
        the residual by about eps * ||J||_inf * ||y||_inf.
        """
        d = self.data
        s = self._nonlinearity_slope(y, lam)
        if self.grid.dim == 1:
            ab = self.b_I - d.tau * self.b_L0 - self.b_L0 * (dt * s)[None, :]
            if d.delta != 0.0:
                ab += (dt * d.delta) * self.b_L0sq
            opnorm = float(np.max(np.abs(ab).sum(axis=0)))
            dy = scipy.linalg.solve_banded((2, 2), ab, rhs)
            res = np.linalg.norm(_banded_matvec(ab, dy) - rhs)
        else:
            J = self.ident - d.tau * self.L0
            if d.delta != 0.0:
                J = J + (dt * d.delta) * self.L0sq
            J = (J - self.L0 @ sp.diags(dt * s)).tocsc()
            opnorm = float(np.max(np.abs(J).sum(axis=1)))
            dy = spla.spsolve(J, rhs)
            res = np.linalg.norm(J @ dy - rhs)
        self.last_opnorm = opnorm
        # normwise backward error of the direct solve
        denom = opnorm * np.linalg.norm(dy) + np.linalg.norm(rhs)
        if denom > 0 and res / denom > self.cfg.linear_tol:
            raise SolverError(
                f"Newton linear solve backward error {res / denom:.3e} above tolerance"
            )
        return dy

    def advance(self, y_old: np.ndarray, t_new: float, dt: float):
        """One backward-Euler step; returns (y, w, xi, iters, residual)."""
        d, cfg = self.data, self.cfg
        lam = d.lam(t_new)
        gsrc = d.g(t_new)
        hvals = d.h(t_new)
        for name, arr in (("lambda", lam), ("g", gsrc), ("h", hvals)):
            if not np.all(np.isfinite(arr)):
                raise StepError(f"data slice {name}({t_new}) is not finite", np.inf)
        flux_src = self.Binj @ hvals
        target_mean = (self.wq @ y_old) / self.volume + dt * float(
            self.grid.boundary_weights @ hvals
        ) / self.volume

        y = y_old.copy()
        r, w = self.residual(y, y_old, dt, lam, gsrc, flux_src)
        rnorm = self.weighted_l2(r)
        iters = 1
        stall = 0
        while rnorm > cfg.newton_tol:
            if iters >= cfg.newton_max_iter:
                raise StepError(
                    f"Newton reached {cfg.newton_max_iter} iterations at t={t_new:.6g} "
                    f"with residual {rnorm:.3e}",
                    rnorm,
                )
            dy = self.newton_direction(y, dt, lam, -r)
            # update below double-precision resolution of the state: the
            # residual is sitting at its evaluation floor, accept the step
            if self.weighted_l2(dy) <= 1e-13 * (1.0 + self.weighted_l2(y)):
                break
            alpha = 1.0
            accepted = False
            for _ in range(9):
                y_try = y + alpha * dy
                r_try, w_try = self.residual(y_try, y_old, dt, lam, gsrc, flux_src)
                rnorm_try = self.weighted_l2(r_try)
                if np.isfinite(rnorm_try) and rnorm_try < rnorm:
                    y, r, w, rnorm = y_try, r_try, w_try, rnorm_try
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # cannot improve: accept if the residual already sits below
                # the quantization floor eps*||J||*||y|| of this operator
                floor = 4.0 * 2.3e-16 * self.last_opnorm * (1.0 + float(np.max(np.abs(y))))
                if rnorm <= floor:
                    break
                stall += 1
                if stall >= 3:
                    raise StepError(
                        f"Newton stalled at t={t_new:.6g} with residual {rnorm:.3e} "
                        f"(round-off floor estimate {floor:.3e})",
                        rnorm,
                    )
            else:
                stall = 0
            iters += 1

        # snap the mean onto the exact boundary-flux balance
        y = y + (target_mean - (self.wq @ y) / self.volume)
        w = self.chemical_potential(y, y_old, dt, lam, gsrc)
        xi = d.graph.yosida(cfg.yosida_eps, y)
        return y, w, xi, iters, rnorm

    def energy(self, y: np.ndarray, t: float) -> float:
        d = self.data
        gradsq = float(y @ (self.grid.stiffness @ y))
        bulk = d.graph.moreau_envelope(self.cfg.yosida_eps, y)
        bulk = bulk + d.lam(t) * d.perturbation.primitive(y)
        return 0.5 * d.delta * gradsq + float(self.wq @ bulk)


def chemical_potential(
    y_new: ScalarField,
    y_old: ScalarField,
    dt: float,
    data: ProblemData,
    t: float,
    yosida_eps: float = 1e-6,
) -> ScalarField:
    """Pointwise chemical potential of the implicit step ending at (y_new, t)."""
    if y_new.grid is not data.grid or y_old.grid is not data.grid:
        raise ValueError("fields must live on the problem grid")
    if dt <= 0:
        raise ValueError("dt must be positive")
    ws = _Workspace(data, StepperConfig(yosida_eps=yosida_eps))
    w = ws.chemical_potential(y_new.flat, y_old.flat, dt, data.lam(t), data.g(t))
    return data.grid.field(w.reshape(data.grid.shape))


def step(
    y_old: ScalarField,
    t_new: float,
    dt: float,
    data: ProblemData,
    cfg: StepperConfig = StepperConfig(),
):
    """Advance one implicit step; returns (y, w, xi fields, diagnostics dict)."""
    ws = _Workspace(data, cfg)
    y, w, xi, iters, rnorm = ws.advance(y_old.flat, t_new, dt)
    grid = data.grid
    diag = {
        "newton_iters": iters,
        "residual": rnorm,
        "mass": float(grid.quad_weights @ y) / grid.volume,
    }
    return (
        grid.field(y.reshape(grid.shape)),
        grid.field(w.reshape(grid.shape)),
        grid.field(xi.reshape(grid.shape)),
        diag,
    )


def solve_trajectory(
    data: ProblemData,
    tg: TimeGrid,
    cfg: StepperConfig = StepperConfig(),
    mollify: bool = False,
) -> Trajectory:
    """March the problem over the time grid.

    With mollify=True and delta > 0 the initial state is the elliptically
    smoothed datum; the delta = 0 limit problem always starts from y0
    itself.  A failing step aborts the run and returns the truncated
    trajectory carrying the failure record.
    """
    grid = data.grid
    ws = _Workspace(data, cfg)
    times = tg.times()
    nsteps = tg.steps
    dt = tg.dt

    if mollify and data.delta > 0.0:
        y_start = mollify_initial(grid, data.y0, data.delta)
    else:
        y_start = data.y0

    shape = grid.shape
    y_hist = np.empty((nsteps + 1,) + shape)
    w_hist = np.full((nsteps + 1,) + shape, np.nan)
    xi_hist = np.empty((nsteps + 1,) + shape)
    mass = np.empty(nsteps + 1)
    energy = np.empty(nsteps + 1)
    iters = np.zeros(nsteps, dtype=int)
    residuals = np.zeros(nsteps)

    y = y_start.flat.copy()
    y_hist[0] = y.reshape(shape)
    xi_hist[0] = data.graph.yosida(cfg.yosida_eps, y).reshape(shape)
    mass[0] = float(grid.quad_weights @ y) / grid.volume
    energy[0] = ws.energy(y, times[0])

    failure = None
    completed = 0
    for n in range(nsteps):
        t_new = times[n + 1]
        try:
            y, w, xi, it, rs = ws.advance(y, t_new, dt)
        except (StepError, SolverError) as exc:
            residual = getattr(exc, "residual", np.nan)
            failure = StepFailure(
                step_index=n + 1, time=t_new, residual=float(residual), message=str(exc)
            )
            break
        completed = n + 1
        y_hist[n + 1] = y.reshape(shape)
        w_hist[n + 1] = w.reshape(shape)
        xi_hist[n + 1] = xi.reshape(shape)
        mass[n + 1] = float(grid.quad_weights @ y) / grid.volume
        energy[n + 1] = ws.energy(y, t_new)
        iters[n] = it
        residuals[n] = rs

    m = completed
    return Trajectory(
        grid=grid,
        timegrid=tg,
        times=times[: m + 1].copy(),
        y=y_hist[: m + 1],
        w=w_hist[: m + 1],
        xi=xi_hist[: m + 1],
        mass=mass[: m + 1],
        energy=energy[: m + 1],
        newton_iters=iters[:m],
        residuals=residuals[:m],
        yosida_eps=cfg.yosida_eps,
        error=failure,
    )
