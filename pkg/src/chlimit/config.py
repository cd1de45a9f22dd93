"""Scenario configuration: a line-oriented ``key = value`` format with
``[section]`` headers, and a deliberately small analytic-expression catalog.

The catalog covers sums of products of constants, coordinates, time, and
cos/sin/exp factors (e.g. ``0.1*cos(pi*x)``, ``0.05*cos(2*pi*x)*exp(-t)``,
``1 + 0.5*x``).  Keeping the grammar this small makes configs trivially
portable and the outputs bit-reproducible; there is no general expression
engine on purpose.

Unknown sections or keys are errors, as are missing required keys; parse
errors carry line numbers and validation errors carry the key path.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import Grid, TimeGrid
from .monotone import make_graph, make_perturbation
from .stepper import ProblemData, StepperConfig


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


# ----------------------------------------------------------------------
# expression catalog

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_]+)"
    r"|(?P<sym>[-+*()]))"
)


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ConfigError(f"cannot tokenize expression at ...{text[pos:]!r}")
        if m.lastgroup == "num":
            out.append(("num", float(m.group("num"))))
        elif m.lastgroup == "name":
            out.append(("name", m.group("name")))
        else:
            out.append(("sym", m.group("sym")))
        pos = m.end()
    out.append(("end", None))
    return out


class Expression:
    """Parsed catalog expression over (x[, y], t)."""

    def __init__(self, text: str):
        self.text = text.strip()
        self._terms = _Parser(self.text).parse()

    def __call__(self, x, y=None, t: float = 0.0):
        acc = 0.0
        for sign, factors in self._terms:
            term = sign
            for f in factors:
                term = term * f(x, y, t)
            acc = acc + term
        return acc if np.ndim(acc) else np.asarray(acc, dtype=float)

    @property
    def uses_y(self) -> bool:
        return self._scan("y")

    @property
    def time_dependent(self) -> bool:
        return self._scan("t")

    def _scan(self, var: str) -> bool:
        return re.search(rf"(?<![A-Za-z_]){var}(?![A-Za-z_])", self.text) is not None

    def __repr__(self):
        return f"Expression({self.text!r})"


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.k = 0

    def peek(self):
        return self.tokens[self.k]

    def take(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_sym(self, sym: str):
        kind, val = self.take()
        if kind != "sym" or val != sym:
            raise ConfigError(f"expected {sym!r} in expression, got {val!r}")

    def parse(self):
        terms = [self.term()]
        while self.peek() == ("sym", "+") or self.peek() == ("sym", "-"):
            _, op = self.take()
            sign, factors = self.term()
            terms.append((-sign if op == "-" else sign, factors))
        if self.peek()[0] != "end":
            raise ConfigError(f"unexpected trailing input in expression: {self.peek()[1]!r}")
        return terms

    def term(self):
        sign = 1.0
        while self.peek() in (("sym", "-"), ("sym", "+")):
            _, op = self.take()
            if op == "-":
                sign = -sign
        factors = [self.factor()]
        while self.peek() == ("sym", "*"):
            self.take()
            factors.append(self.factor())
        return sign, factors

    def factor(self) -> Callable:
        kind, val = self.take()
        if kind == "num":
            c = float(val)
            return lambda x, y, t: c
        if kind != "name":
            raise ConfigError(f"unexpected {val!r} in expression")
        if val == "x":
            return lambda x, y, t: x
        if val == "y":
            return lambda x, y, t: _need_y(y)
        if val == "t":
            return lambda x, y, t: t
        if val == "pi":
            return lambda x, y, t: math.pi
        if val in ("cos", "sin"):
            return self._trig(val)
        if val == "exp":
            return self._exp()
        raise ConfigError(f"unknown name {val!r} in expression (catalog: x, y, t, pi, cos, sin, exp)")

    def _trig(self, fn: str) -> Callable:
        self.expect_sym("(")
        k = 1.0
        kind, val = self.take()
        if kind == "num":
            k = float(val)
            self.expect_sym("*")
            kind, val = self.take()
        if (kind, val) != ("name", "pi"):
            raise ConfigError(f"{fn}(...) must have the form {fn}([k*]pi*x) or {fn}([k*]pi*y)")
        self.expect_sym("*")
        kind, var = self.take()
        if kind != "name" or var not in ("x", "y"):
            raise ConfigError(f"{fn}(...) must end in *x or *y")
        self.expect_sym(")")
        op = np.cos if fn == "cos" else np.sin
        if var == "x":
            return lambda x, y, t: op(k * math.pi * x)
        return lambda x, y, t: op(k * math.pi * _need_y(y))

    def _exp(self) -> Callable:
        self.expect_sym("(")
        sign = 1.0
        while self.peek() == ("sym", "-"):
            self.take()
            sign = -sign
        coef = 1.0
        kind, val = self.take()
        if kind == "num":
            coef = float(val)
            if self.peek() == ("sym", "*"):
                self.take()
                kind, val = self.take()
            else:
                # plain exp(c): a constant
                self.expect_sym(")")
                c = math.exp(sign * coef)
                return lambda x, y, t: c
        if (kind, val) != ("name", "t"):
            raise ConfigError("exp(...) must have the form exp([-][c*]t) or exp(c)")
        self.expect_sym(")")
        a = sign * coef
        return lambda x, y, t: math.exp(a * t) if np.ndim(t) == 0 else np.exp(a * t)


def _need_y(y):
    if y is None:
        raise ConfigError("expression uses 'y' but the grid is one-dimensional")
    return y


# ----------------------------------------------------------------------
# scenario schema

_KNOWN_KEYS = {
    "problem": {"tau", "delta", "graph", "pi", "lambda", "g", "h", "y0"},
    "grid": {"dim", "extent", "extent_x", "extent_y", "n", "n_x", "n_y"},
    "time": {"T", "steps"},
    "run": {
        "kind", "deltas", "fit_mode", "mode",
        "perturb_y0", "perturb_g", "perturb_h",
        "temporal_steps", "temporal_n", "spatial_n", "spatial_steps",
        "newton_tol", "newton_max_iter", "yosida_eps", "linear_tol", "mollify",
        "name",
    },
    "output": {"dir", "snapshots"},
}

_RUN_KINDS = ("single", "sweep", "depcheck", "mms")


@dataclass(frozen=True)
class Scenario:
    name: str
    tau: float
    delta: float
    graph_kind: str
    graph_param: Optional[float]
    pi_name: str
    lam: Expression
    g: Expression
    h: Expression
    y0: Expression
    dim: int
    extents: tuple
    nodes: tuple
    T: float
    steps: int
    kind: str
    deltas: tuple
    fit_mode: str
    dep_mode: str
    perturb_y0: Expression
    perturb_g: Expression
    perturb_h: Expression
    temporal_steps: tuple
    temporal_n: int
    spatial_n: tuple
    spatial_steps: int
    stepper: StepperConfig
    mollify: bool
    out_dir: str
    snapshots: int

    def build_grid(self) -> Grid:
        return Grid(self.extents, self.nodes)

    def build_timegrid(self) -> TimeGrid:
        return TimeGrid(self.T, self.steps)

    def build_problem(self, grid: Grid) -> ProblemData:
        return build_problem(self, grid)


def _field_slice(grid: Grid, expr: Expression):
    coords = grid.coords
    x = coords[0]
    yc = coords[1] if grid.dim == 2 else None
    if not expr.time_dependent:
        vals = np.broadcast_to(np.asarray(expr(x, yc, 0.0), dtype=float), grid.shape).ravel().copy()
        return lambda t: vals
    return lambda t: np.broadcast_to(
        np.asarray(expr(x, yc, t), dtype=float), grid.shape
    ).ravel()


def _trace_slice(grid: Grid, expr: Expression):
    pts = [c.ravel()[grid.boundary_indices] for c in grid.coords]
    x = pts[0]
    yc = pts[1] if grid.dim == 2 else None
    nb = grid.boundary_count
    if not expr.time_dependent:
        vals = np.broadcast_to(np.asarray(expr(x, yc, 0.0), dtype=float), (nb,)).ravel().copy()
        return lambda t: vals
    return lambda t: np.broadcast_to(np.asarray(expr(x, yc, t), dtype=float), (nb,)).ravel()


def build_problem(s: Scenario, grid: Grid) -> ProblemData:
    graph = make_graph(s.graph_kind, s.graph_param)
    pert = make_perturbation(s.pi_name)
    x = grid.coords[0]
    yc = grid.coords[1] if grid.dim == 2 else None
    y0 = grid.field(np.broadcast_to(np.asarray(s.y0(x, yc, 0.0), dtype=float), grid.shape))
    return ProblemData(
        grid=grid,
        tau=s.tau,
        delta=s.delta,
        y0=y0,
        graph=graph,
        perturbation=pert,
        lam=_field_slice(grid, s.lam),
        g=_field_slice(grid, s.g),
        h=_trace_slice(grid, s.h),
    )


def build_perturbed_problem(s: Scenario, base: ProblemData, scale: float = 1.0) -> ProblemData:
    """The depcheck counterpart problem: base data plus scale * perturbations.

    Shares the base's graph and perturbation objects so that the dependence
    check can verify only y0, g, h differ.
    """
    grid = base.grid
    x = grid.coords[0]
    yc = grid.coords[1] if grid.dim == 2 else None
    dy0 = scale * np.broadcast_to(
        np.asarray(s.perturb_y0(x, yc, 0.0), dtype=float), grid.shape
    )
    y0 = grid.field(base.y0.values + dy0)
    dg = _field_slice(grid, s.perturb_g)
    dh = _trace_slice(grid, s.perturb_h)
    g0, h0 = base.g, base.h
    return ProblemData(
        grid=grid,
        tau=base.tau,
        delta=base.delta,
        y0=y0,
        graph=base.graph,
        perturbation=base.perturbation,
        lam=base.lam,
        g=lambda t: g0(t) + scale * dg(t),
        h=lambda t: h0(t) + scale * dh(t),
    )


def _parse_sections(text: str):
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _KNOWN_KEYS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KNOWN_KEYS[current]:
            raise ConfigError(f"line {lineno}: unknown key {current}.{key}")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {current}.{key}")
        if value == "":
            raise ConfigError(f"line {lineno}: empty value for {current}.{key}")
        sections[current][key] = value
    return sections


def _get(sections, section, key, default=None, required=False):
    val = sections.get(section, {}).get(key)
    if val is None:
        if required:
            raise ConfigError(f"missing required key {section}.{key}")
        return default
    return val


def _as_float(val: str, path: str) -> float:
    try:
        return float(val)
    except ValueError:
        raise ConfigError(f"{path}: not a number: {val!r}") from None


def _as_int(val: str, path: str) -> int:
    try:
        return int(val)
    except ValueError:
        raise ConfigError(f"{path}: not an integer: {val!r}") from None


def _as_bool(val: str, path: str) -> bool:
    v = val.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ConfigError(f"{path}: not a boolean: {val!r}")


def _as_expr(val: str, path: str) -> Expression:
    try:
        return Expression(val)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _int_list(val: str, path: str) -> tuple:
    return tuple(_as_int(v.strip(), path) for v in val.split(","))


def parse_config(text: str, name: str = "scenario") -> Scenario:
    """Parse and fully validate a scenario; defaults are applied here."""
    sections = _parse_sections(text)

    tau = _as_float(_get(sections, "problem", "tau", "1"), "problem.tau")
    if tau <= 0:
        raise ConfigError("problem.tau: must be positive")
    delta = _as_float(_get(sections, "problem", "delta", "0"), "problem.delta")
    if not 0.0 <= delta < 1.0:
        raise ConfigError("problem.delta: delta must lie in [0,1)")

    graph_spec = _get(sections, "problem", "graph", required=True).split()
    graph_kind = graph_spec[0]
    graph_param = _as_float(graph_spec[1], "problem.graph") if len(graph_spec) > 1 else None
    if graph_kind not in ("power", "sinh", "sign_jump"):
        raise ConfigError(f"problem.graph: unknown kind {graph_kind!r}")
    if graph_kind == "power":
        p = graph_param if graph_param is not None else 3.0
        if p != int(p) or int(p) < 1 or int(p) % 2 == 0:
            raise ConfigError("problem.graph: power needs an odd integer exponent >= 1")

    pi_name = _get(sections, "problem", "pi", "zero")
    if pi_name not in ("zero", "neg_identity", "sin"):
        raise ConfigError(f"problem.pi: unknown perturbation {pi_name!r}")

    lam = _as_expr(_get(sections, "problem", "lambda", "1"), "problem.lambda")
    g = _as_expr(_get(sections, "problem", "g", "0"), "problem.g")
    h = _as_expr(_get(sections, "problem", "h", "0"), "problem.h")
    y0 = _as_expr(_get(sections, "problem", "y0", required=True), "problem.y0")
    if y0.time_dependent:
        raise ConfigError("problem.y0: must not depend on t")

    dim = _as_int(_get(sections, "grid", "dim", "1"), "grid.dim")
    if dim not in (1, 2):
        raise ConfigError("grid.dim: must be 1 or 2")
    if dim == 1:
        extents = (_as_float(_get(sections, "grid", "extent", "1.0"), "grid.extent"),)
        nodes = (_as_int(_get(sections, "grid", "n", required=True), "grid.n"),)
    else:
        extents = (
            _as_float(_get(sections, "grid", "extent_x", "1.0"), "grid.extent_x"),
            _as_float(_get(sections, "grid", "extent_y", "1.0"), "grid.extent_y"),
        )
        nodes = (
            _as_int(_get(sections, "grid", "n_x", required=True), "grid.n_x"),
            _as_int(_get(sections, "grid", "n_y", required=True), "grid.n_y"),
        )
    if any(n < 3 for n in nodes):
        raise ConfigError("grid.n: need at least 3 nodes per axis")
    for var, label in ((y0, "problem.y0"), (lam, "problem.lambda"), (g, "problem.g"), (h, "problem.h")):
        if dim == 1 and var.uses_y:
            raise ConfigError(f"{label}: uses 'y' but grid.dim = 1")

    T = _as_float(_get(sections, "time", "T", required=True), "time.T")
    if T <= 0:
        raise ConfigError("time.T: must be positive")
    steps = _as_int(_get(sections, "time", "steps", "2048"), "time.steps")
    if steps < 1:
        raise ConfigError("time.steps: must be >= 1")

    kind = _get(sections, "run", "kind", required=True)
    if kind not in _RUN_KINDS:
        raise ConfigError(f"run.kind: must be one of {', '.join(_RUN_KINDS)}")

    deltas = ()
    if kind == "sweep":
        raw = _get(sections, "run", "deltas", required=True)
        deltas = tuple(_as_float(v.strip(), "run.deltas") for v in raw.split(","))
        if any(not 0.0 < d < 1.0 for d in deltas):
            raise ConfigError("run.deltas: every delta must lie in (0,1)")
        if any(b >= a for a, b in zip(deltas, deltas[1:])):
            raise ConfigError("run.deltas: must be strictly decreasing")

    fit_mode = _get(sections, "run", "fit_mode", "delta")
    if fit_mode not in ("delta", "delta_plus_init"):
        raise ConfigError("run.fit_mode: must be 'delta' or 'delta_plus_init'")
    dep_mode = _get(sections, "run", "mode", "limit")
    if dep_mode not in ("limit", "fixed_delta"):
        raise ConfigError("run.mode: must be 'limit' or 'fixed_delta'")

    perturb_y0 = _as_expr(_get(sections, "run", "perturb_y0", "0"), "run.perturb_y0")
    perturb_g = _as_expr(_get(sections, "run", "perturb_g", "0"), "run.perturb_g")
    perturb_h = _as_expr(_get(sections, "run", "perturb_h", "0"), "run.perturb_h")
    if kind == "depcheck" and all(
        e.text == "0" for e in (perturb_y0, perturb_g, perturb_h)
    ):
        raise ConfigError("run.perturb_y0/perturb_g/perturb_h: depcheck needs a nonzero perturbation")

    stepper = StepperConfig(
        newton_tol=_as_float(_get(sections, "run", "newton_tol", "1e-10"), "run.newton_tol"),
        newton_max_iter=_as_int(_get(sections, "run", "newton_max_iter", "30"), "run.newton_max_iter"),
        yosida_eps=_as_float(_get(sections, "run", "yosida_eps", "1e-6"), "run.yosida_eps"),
        linear_tol=_as_float(_get(sections, "run", "linear_tol", "1e-12"), "run.linear_tol"),
    )

    scenario = Scenario(
        name=_get(sections, "run", "name", name),
        tau=tau,
        delta=delta,
        graph_kind=graph_kind,
        graph_param=graph_param,
        pi_name=pi_name,
        lam=lam,
        g=g,
        h=h,
        y0=y0,
        dim=dim,
        extents=extents,
        nodes=nodes,
        T=T,
        steps=steps,
        kind=kind,
        deltas=deltas,
        fit_mode=fit_mode,
        dep_mode=dep_mode,
        perturb_y0=perturb_y0,
        perturb_g=perturb_g,
        perturb_h=perturb_h,
        temporal_steps=_int_list(_get(sections, "run", "temporal_steps", "8,16,32,64"), "run.temporal_steps"),
        temporal_n=_as_int(_get(sections, "run", "temporal_n", "513"), "run.temporal_n"),
        spatial_n=_int_list(_get(sections, "run", "spatial_n", "9,17,33"), "run.spatial_n"),
        spatial_steps=_as_int(_get(sections, "run", "spatial_steps", "16384"), "run.spatial_steps"),
        stepper=stepper,
        mollify=_as_bool(_get(sections, "run", "mollify", "false"), "run.mollify"),
        out_dir=_get(sections, "output", "dir", "out"),
        snapshots=_as_int(_get(sections, "output", "snapshots", "5"), "output.snapshots"),
    )
    return scenario
