"""chlimit: viscous Cahn-Hilliard solver and vanishing-diffusivity limit checks."""

from .grid import (
    BoundaryTrace,
    FieldNorms,
    Grid,
    GridMismatchError,
    ScalarField,
    TimeGrid,
    boundary_integral,
    boundary_l2,
    integrate,
    laplacian_neumann,
    mean,
    norms,
)

__all__ = [
    "BoundaryTrace",
    "FieldNorms",
    "Grid",
    "GridMismatchError",
    "ScalarField",
    "TimeGrid",
    "boundary_integral",
    "boundary_l2",
    "integrate",
    "laplacian_neumann",
    "mean",
    "norms",
]

__version__ = "0.1.0"
