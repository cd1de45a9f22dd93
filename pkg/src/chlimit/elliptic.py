"""Mean-zero inverse Neumann Laplacian, the dual (star) norm built on it,
and the elliptic smoother for initial data.

The inverse operator solves the discrete variational problem

    dirichlet_form(u, z) = integrate(v * z)   for all nodal z,

on the mean-zero subspace.  It is realized as preconditioned conjugate
gradients on the stiffness matrix with the constant kernel projected out
every iteration, rather than by pinning a node; this keeps the operator
symmetric and makes integrate(v * inverse(v)) equal the squared dual
seminorm to solver tolerance.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .grid import Grid, ScalarField, grad_l2_squared, integrate, mean

DEFAULT_TOL = 1e-12


class SolverError(RuntimeError):
    """An iterative or direct linear solve failed."""


class MeanZeroViolation(ValueError):
    """Input field is not mean-zero within tolerance."""


def require_mean_zero(grid: Grid, v: ScalarField) -> None:
    m = mean(grid, v)
    if abs(m) > 1e-10 * (1.0 + float(np.max(np.abs(v.values)))):
        raise MeanZeroViolation(f"field mean {m:.3e} exceeds the mean-zero tolerance")


def project_mean_zero(grid: Grid, v: ScalarField) -> ScalarField:
    return grid.field(v.values - mean(grid, v))


def _cg_kernel_free(
    K: sp.csr_matrix,
    b: np.ndarray,
    tol: float,
    max_iter: int,
    x0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """CG for K x = b where K is SPD on the complement of constants.

    b must be orthogonal to constants; the Jacobi-preconditioned residual is
    re-projected onto that complement each iteration so round-off cannot
    feed the kernel.  A warm start x0 (e.g. the solution of a nearby system)
    cuts the iteration count sharply in time-series use.
    """
    n = b.size
    inv_diag = 1.0 / K.diagonal()
    b = b - b.mean()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = x0 - x0.mean()
        r = b - K @ x
        r -= r.mean()
        if np.linalg.norm(r) <= tol * bnorm:
            return x
    z = inv_diag * r
    z -= z.mean()
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        Kp = K @ p
        alpha = rz / float(p @ Kp)
        x += alpha * p
        r -= alpha * Kp
        if np.linalg.norm(r) <= tol * bnorm:
            return x - x.mean()
        z = inv_diag * r
        z -= z.mean()
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"conjugate gradients stagnated after {max_iter} iterations "
        f"(relative residual {np.linalg.norm(r) / bnorm:.3e}, target {tol:.1e})"
    )


def neumann_inverse(
    grid: Grid,
    v: ScalarField,
    tol: float = DEFAULT_TOL,
    x0: Optional[np.ndarray] = None,
) -> ScalarField:
    """Solve -lap(u) = v with zero flux, returning the mean-zero solution."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    require_mean_zero(grid, v)
    w = grid.quad_weights
    rhs = w * (v.flat - mean(grid, v))
    u = _cg_kernel_free(
        grid.stiffness, rhs, tol, max_iter=max(20 * grid.node_count, 2000), x0=x0
    )
    u -= (w @ u) / grid.volume
    return grid.field(u.reshape(grid.shape))


def star_norm(grid: Grid, v: ScalarField, tol: float = DEFAULT_TOL) -> float:
    """Dual norm sqrt(|grad inverse(v - mean)|^2 + mean^2).

    Equivalent to the H^1-dual norm; the mean carries the part the inverse
    Laplacian cannot see.
    """
    m = mean(grid, v)
    u = neumann_inverse(grid, grid.field(v.values - m), tol)
    return float(np.sqrt(grad_l2_squared(grid, u) + m * m))


def star_norm_series(grid: Grid, series: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Dual norms of the rows of a (m, node_count) array.

    Consecutive rows of a trajectory are close, so each inverse solve warm
    starts from the previous one; this is an order of magnitude cheaper
    than independent solves.
    """
    series = series.reshape(series.shape[0], -1)
    w = grid.quad_weights
    K = grid.stiffness
    vol = grid.volume
    out = np.empty(series.shape[0])
    u_prev = None
    for i, v in enumerate(series):
        m = float(w @ v) / vol
        rhs = w * (v - m)
        u = _cg_kernel_free(K, rhs, tol, max_iter=max(20 * grid.node_count, 2000), x0=u_prev)
        out[i] = np.sqrt(max(float(u @ (K @ u)), 0.0) + m * m)
        u_prev = u
    return out


def star_inner(grid: Grid, a: ScalarField, b: ScalarField, tol: float = DEFAULT_TOL) -> float:
    """Inner product inducing star_norm: integrate(a * inverse(b - mean)) + mean(a)mean(b)."""
    ma, mb = mean(grid, a), mean(grid, b)
    ub = neumann_inverse(grid, grid.field(b.values - mb), tol)
    return float(integrate(grid, grid.field((a.values - ma) * ub.values)) + ma * mb)


def _solve_shifted_banded_1d(grid: Grid, delta: float, rhs: np.ndarray) -> np.ndarray:
    """Direct tridiagonal solve of (I - delta*lap0) u = rhs in 1D."""
    n = grid.nodes_per_axis[0]
    a = delta / grid.spacing[0] ** 2
    ab = np.zeros((3, n))
    ab[1, :] = 1.0 + 2.0 * a
    ab[0, 1:] = -a
    ab[2, :-1] = -a
    ab[0, 1] = -2.0 * a
    ab[2, n - 2] = -2.0 * a
    return scipy.linalg.solve_banded((1, 1), ab, rhs)


def mollify_initial(grid: Grid, y0: ScalarField, delta: float) -> ScalarField:
    """Smooth y0 at scale sqrt(delta) by solving u - delta*lap(u) = y0, zero flux.

    The solve preserves the mean of y0 to round-off and never increases the
    integral of any convex potential of the field.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0,1)")
    if grid.dim == 1:
        u = _solve_shifted_banded_1d(grid, delta, y0.flat)
    else:
        # SPD weighted form (W + delta*K) u = W y0, plain Jacobi CG
        W = grid.quad_weights
        A = sp.diags(W) + delta * grid.stiffness
        b = W * y0.flat
        inv_diag = 1.0 / A.diagonal()
        x = y0.flat.copy()
        r = b - A @ x
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        bnorm = float(np.linalg.norm(b))
        for _ in range(max(20 * grid.node_count, 2000)):
            Ap = A @ p
            alpha = rz / float(p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            if np.linalg.norm(r) <= 1e-12 * bnorm:
                break
            z = inv_diag * r
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        else:
            raise SolverError("mollifier CG did not reach tolerance")
        u = x
    return grid.field(u.reshape(grid.shape))
