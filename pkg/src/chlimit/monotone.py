"""Maximal monotone graphs on R with resolvents and Yosida approximations.

A graph here is the subdifferential of a convex potential that is finite on
all of R, vanishes at 0 and is nonnegative.  The built-in kinds are odd
powers r^p, sinh, and the scaled sign jump rho*sign(r) (whose potential is
rho*|r|); arbitrary graphs can be supplied through ``CustomGraph``.

The resolvent (I + eps*graph)^{-1} is the workhorse: it is computed in
closed form where one exists (power 1, sign jump) and otherwise by a
vectorized safeguarded Newton iteration that falls back to bisection on a
sign-preserving bracket.  Everything is elementwise and accepts arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

RESOLVENT_TOL = 1e-13
_RESOLVENT_MAX_ITER = 200


class ResolventError(RuntimeError):
    """Scalar resolvent solve failed to converge."""


class GrowthCheck(NamedTuple):
    ok: bool
    constant: float


def _as_array(r):
    return np.asarray(r, dtype=float)


class MonotoneGraph:
    """Base class; subclasses provide the potential and its minimal section."""

    name = "graph"
    #: single-valued graphs evaluate the Yosida map as section(resolvent),
    #: which avoids the (r - J)/eps cancellation at small eps
    single_valued = False

    def potential(self, r):
        """Convex potential, >= 0, zero at the origin."""
        raise NotImplementedError

    def minimal_section(self, r):
        """Least-absolute-value element of the graph at r."""
        raise NotImplementedError

    def section_derivative(self, r):
        """Slope of the section where smooth; central differences by default."""
        r = _as_array(r)
        h = 1e-6 * (1.0 + np.abs(r))
        return (self.minimal_section(r + h) - self.minimal_section(r - h)) / (2.0 * h)

    def resolvent(self, eps: float, r):
        """Solve J + eps*s = r with s in graph(J), elementwise.

        The root is bracketed by [min(r, 0), max(r, 0)] because the section
        vanishes at 0 and is monotone; Newton steps are taken inside the
        bracket and replaced by bisection whenever they leave it.  For a
        multivalued graph the bracket collapses onto the jump abscissa,
        which is the correct resolvent value there.
        """
        if eps <= 0:
            raise ValueError("eps must be positive")
        r = _as_array(r)
        scalar = r.ndim == 0
        shape = r.shape
        r = np.atleast_1d(r).ravel()
        lo = np.minimum(r, 0.0)
        hi = np.maximum(r, 0.0)
        # one Newton step from r is an excellent start for small eps
        with np.errstate(all="ignore"):
            d0 = 1.0 + eps * self.section_derivative(r)
            J = r - eps * self.minimal_section(r) / np.where(
                np.isfinite(d0) & (d0 > 0), d0, 1.0
            )
        J = np.where(np.isfinite(J), np.clip(J, lo, hi), r / 2.0)
        # machine-relative targets: an absolute-only tolerance would make the
        # map r -> resolvent(r) noisy at that scale, which the PDE stepper
        # amplifies by 1/h^2 and cannot iterate below
        gtol = 4e-16 * (1.0 + np.abs(r))
        wtol = np.minimum(RESOLVENT_TOL, 4e-16 * (1.0 + np.abs(r)))
        done = np.zeros(r.shape, dtype=bool)
        converged = False
        for _ in range(_RESOLVENT_MAX_ITER):
            g = J + eps * self.minimal_section(J) - r
            hi = np.where(~done & (g > 0), J, hi)
            lo = np.where(~done & (g <= 0), J, lo)
            done = done | ((hi - lo) <= wtol) | (np.abs(g) <= gtol)
            if np.all(done):
                converged = True
                break
            d = 1.0 + eps * self.section_derivative(J)
            with np.errstate(all="ignore"):
                Jn = J - g / np.where(np.isfinite(d) & (d > 0), d, 1.0)
            bad = ~np.isfinite(Jn) | (Jn <= lo) | (Jn >= hi)
            J = np.where(done, J, np.where(bad, 0.5 * (lo + hi), Jn))
        if not converged:
            width = float(np.max((hi - lo)[~done]))
            raise ResolventError(
                f"resolvent of {self.name} did not converge: eps={eps}, "
                f"max bracket width {width:.3e}"
            )
        # 0 is always in the graph at 0
        J = np.where(r == 0.0, 0.0, J)
        return float(J[0]) if scalar else J.reshape(shape)

    def yosida(self, eps: float, r):
        """Lipschitz regularization (r - resolvent(r)) / eps.

        For single-valued graphs this equals section(resolvent(r)) exactly
        and is evaluated that way for numerical stability.
        """
        r = _as_array(r)
        J = self.resolvent(eps, r)
        if self.single_valued:
            return self.minimal_section(J)
        return (r - J) / eps

    def yosida_derivative(self, eps: float, r):
        """d/dr of the Yosida approximation, via the resolvent slope."""
        J = self.resolvent(eps, _as_array(r))
        d = self.section_derivative(J)
        return d / (1.0 + eps * d)

    def moreau_envelope(self, eps: float, r):
        """Smoothed potential whose derivative is the Yosida approximation."""
        r = _as_array(r)
        J = self.resolvent(eps, r)
        return self.potential(J) + (r - J) ** 2 / (2.0 * eps)


class PowerGraph(MonotoneGraph):
    """beta(r) = r^p for odd p >= 1; potential r^(p+1)/(p+1)."""

    single_valued = True

    def __init__(self, p: int):
        p = int(p)
        if p < 1 or p % 2 == 0:
            raise ValueError("power graphs need an odd exponent >= 1")
        self.p = p
        self.name = f"power {p}"

    def potential(self, r):
        r = _as_array(r)
        if self.p == 3:
            r2 = r * r
            return 0.25 * r2 * r2
        return r ** (self.p + 1) / (self.p + 1)

    def minimal_section(self, r):
        r = _as_array(r)
        if self.p == 3:
            return r * r * r
        return r ** self.p

    def section_derivative(self, r):
        r = _as_array(r)
        if self.p == 3:
            return 3.0 * r * r
        return self.p * r ** (self.p - 1)

    def resolvent(self, eps: float, r):
        if self.p == 1:
            return _as_array(r) / (1.0 + eps)
        return super().resolvent(eps, r)


class SinhGraph(MonotoneGraph):
    """beta(r) = sinh(r); potential cosh(r) - 1."""

    name = "sinh"
    single_valued = True

    def potential(self, r):
        return np.cosh(_as_array(r)) - 1.0

    def minimal_section(self, r):
        return np.sinh(_as_array(r))

    def section_derivative(self, r):
        return np.cosh(_as_array(r))


class SignJumpGraph(MonotoneGraph):
    """beta = rho*sign with the full interval [-rho, rho] at 0; potential rho*|r|.

    The resolvent is the soft-threshold map with threshold eps*rho, so the
    Yosida approximation is the clamp of r/eps to [-rho, rho].
    """

    def __init__(self, rho: float = 1.0):
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.rho = float(rho)
        self.name = f"sign_jump {self.rho:g}"

    def potential(self, r):
        return self.rho * np.abs(_as_array(r))

    def minimal_section(self, r):
        return self.rho * np.sign(_as_array(r))

    def resolvent(self, eps: float, r):
        r = _as_array(r)
        return np.sign(r) * np.maximum(np.abs(r) - eps * self.rho, 0.0)

    def yosida(self, eps: float, r):
        return np.clip(_as_array(r) / eps, -self.rho, self.rho)

    def yosida_derivative(self, eps: float, r):
        r = _as_array(r)
        return np.where(np.abs(r) < eps * self.rho, 1.0 / eps, 0.0)

    def moreau_envelope(self, eps: float, r):
        # Huber function: quadratic inside the threshold, affine outside
        r = np.abs(_as_array(r))
        return np.where(
            r <= eps * self.rho,
            r ** 2 / (2.0 * eps),
            self.rho * r - eps * self.rho ** 2 / 2.0,
        )


class CustomGraph(MonotoneGraph):
    """Graph given by a convex potential and a section oracle."""

    def __init__(
        self,
        name: str,
        potential: Callable[[np.ndarray], np.ndarray],
        section: Callable[[np.ndarray], np.ndarray],
        derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        check: bool = True,
        single_valued: bool = False,
    ):
        self.name = name
        self._potential = potential
        self._section = section
        self._derivative = derivative
        self.single_valued = bool(single_valued)
        if check:
            self._validate()

    def potential(self, r):
        return _as_array(self._potential(_as_array(r)))

    def minimal_section(self, r):
        return _as_array(self._section(_as_array(r)))

    def section_derivative(self, r):
        if self._derivative is not None:
            return _as_array(self._derivative(_as_array(r)))
        return super().section_derivative(r)

    def _validate(self, lo: float = -10.0, hi: float = 10.0, samples: int = 201):
        r = np.linspace(lo, hi, samples)
        p = self.potential(r)
        if not np.all(np.isfinite(p)):
            raise ValueError(f"{self.name}: potential not finite on [{lo}, {hi}]")
        if np.any(p < -1e-12):
            raise ValueError(f"{self.name}: potential must be nonnegative")
        if abs(float(self.potential(0.0))) > 1e-12:
            raise ValueError(f"{self.name}: potential must vanish at 0")
        if abs(float(self.minimal_section(0.0))) > 1e-12:
            raise ValueError(f"{self.name}: 0 must belong to the graph at 0")
        mid = 0.5 * (p[:-1] + p[1:])
        pm = self.potential(0.5 * (r[:-1] + r[1:]))
        if np.any(pm > mid + 1e-10 * (1 + np.abs(mid))):
            raise ValueError(f"{self.name}: potential fails midpoint convexity")


def make_graph(kind: str, param: Optional[float] = None) -> MonotoneGraph:
    """Factory for the built-in graph kinds, as used by config files."""
    kind = kind.strip().lower()
    if kind == "power":
        return PowerGraph(int(param if param is not None else 3))
    if kind == "sinh":
        return SinhGraph()
    if kind == "sign_jump":
        return SignJumpGraph(param if param is not None else 1.0)
    raise ValueError(f"unknown graph kind {kind!r}")


def verify_growth(graph: MonotoneGraph, lo: float, hi: float, samples: int) -> GrowthCheck:
    """Smallest sampled C with |section(r)| <= C*(1 + potential(r)).

    The constant certifies the growth-compatibility of the section with its
    potential on [lo, hi] only; callers should sample a range that covers
    the states the solver will visit, with margin.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if samples < 3:
        raise ValueError("need at least 3 samples")
    r = np.linspace(lo, hi, samples)
    ratio = np.abs(graph.minimal_section(r)) / (1.0 + np.abs(graph.potential(r)))
    c = float(np.max(ratio))
    return GrowthCheck(ok=bool(np.isfinite(c)), constant=c)


# module-level aliases mirroring the operation names used by callers


def potential(graph: MonotoneGraph, r):
    return graph.potential(r)


def minimal_section(graph: MonotoneGraph, r):
    return graph.minimal_section(r)


def resolvent(graph: MonotoneGraph, eps: float, r):
    return graph.resolvent(eps, r)


def yosida(graph: MonotoneGraph, eps: float, r):
    return graph.yosida(eps, r)


@dataclass(frozen=True)
class LipschitzPerturbation:
    """Lipschitz perturbation vanishing at 0, with optional closed forms.

    ``antiderivative`` (the primitive vanishing at 0) feeds the energy
    diagnostic; when missing it is evaluated by Gauss-Legendre quadrature
    along [0, r].  ``derivative`` feeds the Newton Jacobian; central
    differences are used when it is not supplied.
    """

    pi: Callable[[np.ndarray], np.ndarray]
    lipschitz_constant: float
    name: str = "pi"
    derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    antiderivative: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.lipschitz_constant < 0:
            raise ValueError("Lipschitz constant must be >= 0")
        if abs(float(np.asarray(self.pi(0.0)))) > 1e-12:
            raise ValueError("perturbation must vanish at 0")

    def __call__(self, r):
        return _as_array(self.pi(_as_array(r)))

    def prime(self, r):
        r = _as_array(r)
        if self.derivative is not None:
            return np.broadcast_to(_as_array(self.derivative(r)), r.shape)
        h = 1e-6 * (1.0 + np.abs(r))
        return (self(r + h) - self(r - h)) / (2.0 * h)

    def primitive(self, r):
        r = _as_array(r)
        if self.antiderivative is not None:
            return np.broadcast_to(_as_array(self.antiderivative(r)), r.shape)
        # int_0^r pi = r * int_0^1 pi(r t) dt, 20-point Gauss-Legendre
        t, w = np.polynomial.legendre.leggauss(20)
        t = 0.5 * (t + 1.0)
        w = 0.5 * w
        acc = np.zeros_like(r)
        for tk, wk in zip(t, w):
            acc += wk * self(r * tk)
        return r * acc


def zero_perturbation() -> LipschitzPerturbation:
    return LipschitzPerturbation(
        pi=lambda r: np.zeros_like(_as_array(r)),
        lipschitz_constant=0.0,
        name="zero",
        derivative=lambda r: np.zeros_like(_as_array(r)),
        antiderivative=lambda r: np.zeros_like(_as_array(r)),
    )


def neg_identity_perturbation() -> LipschitzPerturbation:
    """pi(r) = -r, the concave half of the classical double well."""
    return LipschitzPerturbation(
        pi=lambda r: -_as_array(r),
        lipschitz_constant=1.0,
        name="neg_identity",
        derivative=lambda r: -np.ones_like(_as_array(r)),
        antiderivative=lambda r: -0.5 * _as_array(r) ** 2,
    )


def make_perturbation(name: str) -> LipschitzPerturbation:
    name = name.strip().lower()
    if name == "zero":
        return zero_perturbation()
    if name == "neg_identity":
        return neg_identity_perturbation()
    if name == "sin":
        return LipschitzPerturbation(
            pi=np.sin,
            lipschitz_constant=1.0,
            name="sin",
            derivative=np.cos,
            antiderivative=lambda r: 1.0 - np.cos(_as_array(r)),
        )
    raise ValueError(f"unknown perturbation {name!r}")
