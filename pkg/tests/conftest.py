import numpy as np
import pytest

from chlimit.grid import Grid
from chlimit.monotone import PowerGraph, neg_identity_perturbation
from chlimit.stepper import ProblemData


def double_well_problem(n: int = 257, h_flux: float = 0.8, tau: float = 1.0) -> ProblemData:
    """The classical double-well benchmark: cubic graph, lambda = 1,
    pi(r) = -r, smooth source, constant boundary flux with nonzero total."""
    grid = Grid((1.0,), (n,))
    x = grid.coords[0]
    y0 = grid.field(0.1 * np.cos(np.pi * x))
    cosx = np.cos(np.pi * x).ravel()

    def g_fn(t: float) -> np.ndarray:
        return 0.05 * np.exp(-t) * cosx

    return ProblemData.make(
        grid,
        tau,
        0.0,
        y0,
        PowerGraph(3),
        neg_identity_perturbation(),
        lam=1.0,
        g=g_fn,
        h=h_flux,
    )
