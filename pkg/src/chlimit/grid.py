"""Uniform tensor grids on a rectangle with trapezoidal quadrature and a
flux-aware Neumann Laplacian.

The grid owns the discrete calculus used everywhere else: integration and
means, boundary integrals, and a second-order finite-difference Laplacian
whose boundary stencil is closed with ghost nodes satisfying a centered
flux condition.  With trapezoidal weights this closure makes the discrete
divergence theorem

    integrate(lap(f, flux)) == boundary_integral(flux)

hold to round-off, which in turn makes the mass-balance identity of the
time stepper exact rather than O(h).

Corner treatment in 2D: a corner node lies on two faces and its single
trace value is used as the outward normal derivative for both incident
axes; its boundary quadrature weight is half an interval from each edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp


class GridMismatchError(ValueError):
    """A field or trace was used with a grid it does not belong to."""


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    """Zero-flux 1D Laplacian; boundary rows use the mirrored ghost stencil."""
    a = 1.0 / (h * h)
    main = np.full(n, -2.0 * a)
    off = np.full(n - 1, a)
    lap = sp.diags([off, main, off], offsets=[-1, 0, 1], format="lil")
    lap[0, 1] = 2.0 * a
    lap[n - 1, n - 2] = 2.0 * a
    return lap.tocsr()


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0, extents[0]] x ... with nodes at cell corners.

    Parameters
    ----------
    extents : tuple of float
        Physical side lengths, one per axis (1 or 2 entries).
    nodes_per_axis : tuple of int
        Node counts per axis, each >= 3.
    """

    extents: tuple[float, ...]
    nodes_per_axis: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        object.__setattr__(self, "nodes_per_axis", tuple(int(n) for n in self.nodes_per_axis))
        if len(self.extents) not in (1, 2) or len(self.extents) != len(self.nodes_per_axis):
            raise ValueError("grid must be 1D or 2D with matching extents and node counts")
        if any(e <= 0 for e in self.extents):
            raise ValueError("extents must be positive")
        if any(n < 3 for n in self.nodes_per_axis):
            raise ValueError("need at least 3 nodes per axis")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / (n - 1) for e, n in zip(self.extents, self.nodes_per_axis))

    @property
    def node_count(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            np.linspace(0.0, e, n) for e, n in zip(self.extents, self.nodes_per_axis)
        )

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Node coordinates as broadcast arrays of shape ``self.shape``."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Flattened tensor-product trapezoidal weights (C order)."""
        w = _trapezoid_weights(self.nodes_per_axis[0], self.spacing[0])
        for n, h in zip(self.nodes_per_axis[1:], self.spacing[1:]):
            w = np.kron(w, _trapezoid_weights(n, h))
        w.flags.writeable = False
        return w

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        mask.flags.writeable = False
        return mask

    @cached_property
    def boundary_indices(self) -> np.ndarray:
        """Flat indices of boundary nodes, sorted; the canonical trace order."""
        idx = np.flatnonzero(self.boundary_mask.ravel())
        idx.flags.writeable = False
        return idx

    @property
    def boundary_count(self) -> int:
        return self.boundary_indices.size

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Quadrature weights on the boundary, aligned with boundary_indices.

        1D boundaries are two points with counting measure (weight 1 each).
        In 2D each node accumulates the trapezoidal weight of every edge it
        lies on, so corners are weighted once per incident edge half-interval.
        """
        acc = np.zeros(self.shape)
        for ax in range(self.dim):
            trans = [
                _trapezoid_weights(n, h)
                for a, (n, h) in enumerate(zip(self.nodes_per_axis, self.spacing))
                if a != ax
            ]
            face_w = trans[0] if trans else np.array(1.0)
            idx = [slice(None)] * self.dim
            for side in (0, -1):
                idx[ax] = side
                acc[tuple(idx)] += face_w
        w = acc.ravel()[self.boundary_indices]
        w.flags.writeable = False
        return w

    @cached_property
    def laplacian_zero_flux(self) -> sp.csr_matrix:
        """Sparse zero-flux Laplacian acting on flattened fields."""
        ops = [_laplacian_1d(n, h) for n, h in zip(self.nodes_per_axis, self.spacing)]
        if self.dim == 1:
            return ops[0]
        n0, n1 = self.nodes_per_axis
        return (sp.kron(ops[0], sp.identity(n1)) + sp.kron(sp.identity(n0), ops[1])).tocsr()

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Symmetric positive semidefinite K = -W @ L0 (kernel: constants).

        u @ K @ v equals the weighted sum of one-sided difference-quotient
        products, i.e. the discrete Dirichlet form; grad_l2(u)^2 == u @ K @ u.
        """
        W = sp.diags(self.quad_weights)
        K = (-(W @ self.laplacian_zero_flux)).tocsr()
        # symmetrize round-off
        return ((K + K.T) * 0.5).tocsr()

    @cached_property
    def flux_injection(self) -> sp.csr_matrix:
        """Maps boundary-trace values to the Laplacian source they induce.

        laplacian_neumann(f, flux) == L0 @ f + flux_injection @ flux.values;
        the coefficient 2/h per incident face comes from the ghost closure
        ghost = inner neighbor + 2 h flux.
        """
        rows, cols, vals = [], [], []
        pos_of = {int(g): b for b, g in enumerate(self.boundary_indices)}
        for ax in range(self.dim):
            coef = 2.0 / self.spacing[ax]
            idx_grid = np.arange(self.node_count).reshape(self.shape)
            for side in (0, -1):
                sel = [slice(None)] * self.dim
                sel[ax] = side
                for g in np.ravel(idx_grid[tuple(sel)]):
                    rows.append(int(g))
                    cols.append(pos_of[int(g)])
                    vals.append(coef)
        return sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.node_count, self.boundary_count)
        )

    # ------------------------------------------------------------------
    # constructors for data living on this grid

    def field(self, values) -> "ScalarField":
        return ScalarField(self, np.asarray(values, dtype=float))

    def field_from_function(self, fn: Callable[..., np.ndarray]) -> "ScalarField":
        """Evaluate ``fn(x)`` (1D) or ``fn(x, y)`` (2D) at the nodes."""
        vals = np.broadcast_to(np.asarray(fn(*self.coords), dtype=float), self.shape)
        return ScalarField(self, vals.copy())

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.shape))

    def trace(self, values) -> "BoundaryTrace":
        return BoundaryTrace(self, np.asarray(values, dtype=float))

    def trace_from_function(self, fn: Callable[..., np.ndarray]) -> "BoundaryTrace":
        pts = [c.ravel()[self.boundary_indices] for c in self.coords]
        vals = np.broadcast_to(
            np.asarray(fn(*pts), dtype=float), (self.boundary_count,)
        )
        return BoundaryTrace(self, vals.copy())

    def zero_trace(self) -> "BoundaryTrace":
        return BoundaryTrace(self, np.zeros(self.boundary_count))


@dataclass(frozen=True)
class ScalarField:
    """Nodal values of a scalar function on a Grid.  Immutable."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            if vals.size == self.grid.node_count:
                vals = vals.reshape(self.grid.shape)
            else:
                raise GridMismatchError(
                    f"field has {vals.size} values, grid has {self.grid.node_count} nodes"
                )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals = np.array(vals, copy=True)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self.grid, other)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self.grid, other)
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True)
class BoundaryTrace:
    """Values on the boundary nodes of a Grid, in boundary_indices order."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.size != self.grid.boundary_count:
            raise GridMismatchError(
                f"trace has {vals.size} values, boundary has {self.grid.boundary_count} nodes"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("trace values must be finite")
        vals = np.array(vals, copy=True)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into ``steps`` implicit-Euler steps."""

    T: float
    steps: int

    def __post_init__(self):
        if self.T <= 0 or self.steps < 1:
            raise ValueError("need T > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)


class FieldNorms(NamedTuple):
    l2: float
    linf: float
    grad_l2: float


def _check_same_grid(grid: Grid, obj) -> None:
    if obj.grid is not grid:
        raise GridMismatchError("object does not belong to this grid")


# ----------------------------------------------------------------------
# discrete calculus


def integrate(grid: Grid, f: ScalarField) -> float:
    """Trapezoidal-rule integral over the domain; exact for per-cell affine f."""
    _check_same_grid(grid, f)
    return float(grid.quad_weights @ f.flat)


def mean(grid: Grid, f: ScalarField) -> float:
    """Mean value integrate(f) / |domain|."""
    return integrate(grid, f) / grid.volume


def boundary_integral(grid: Grid, t: BoundaryTrace) -> float:
    """Integral over the boundary: counting measure in 1D, edge trapezoid in 2D."""
    _check_same_grid(grid, t)
    return float(grid.boundary_weights @ t.values)


def boundary_l2(grid: Grid, t: BoundaryTrace) -> float:
    """L2 norm of a trace under the boundary quadrature."""
    _check_same_grid(grid, t)
    return float(np.sqrt(grid.boundary_weights @ (t.values * t.values)))


def laplacian_neumann(grid: Grid, f: ScalarField, flux: BoundaryTrace) -> ScalarField:
    """Second-order Laplacian of f with prescribed outward normal derivative.

    Interior nodes use the centered stencil; each boundary face closes the
    stencil with the ghost value (inner neighbor + 2 h flux), so
    integrate(result) equals boundary_integral(flux) exactly.
    """
    _check_same_grid(grid, f)
    _check_same_grid(grid, flux)
    out = grid.laplacian_zero_flux @ f.flat + grid.flux_injection @ flux.values
    return ScalarField(grid, out.reshape(grid.shape))


def grad_l2_squared(grid: Grid, f: ScalarField) -> float:
    """Discrete Dirichlet energy: one-sided difference quotients squared
    times edge measure (transverse trapezoid weights).  Coincides with
    f @ stiffness @ f, so it is the energy norm of the zero-flux Laplacian.
    """
    _check_same_grid(grid, f)
    vals = f.values
    total = 0.0
    for ax in range(grid.dim):
        h = grid.spacing[ax]
        d2 = (np.diff(vals, axis=ax) / h) ** 2
        # edge measure: h along the differenced axis, trapezoid transverse
        w = np.full(grid.nodes_per_axis[ax] - 1, h)
        for a in range(grid.dim):
            if a == ax:
                continue
            w = np.multiply.outer(w, _trapezoid_weights(grid.nodes_per_axis[a], grid.spacing[a]))
            if a < ax:
                w = np.moveaxis(w, -1, 0)
        total += float(np.sum(d2 * w))
    return total


def norms(grid: Grid, f: ScalarField) -> FieldNorms:
    """L2 (quadrature), max-abs, and Dirichlet-energy norms of a field."""
    _check_same_grid(grid, f)
    l2 = float(np.sqrt(max(grid.quad_weights @ (f.flat * f.flat), 0.0)))
    linf = float(np.max(np.abs(f.values)))
    return FieldNorms(l2=l2, linf=linf, grad_l2=float(np.sqrt(grad_l2_squared(grid, f))))
