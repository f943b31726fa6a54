"""Carleman-weighted CGO construction and local-data potential reconstruction.

Layout:
    geometry  box domain, slab partition, frames, grids, boundary nodes
    fields    grid fields, FD calculus, quadrature, QGRID1 serialization
    weights   cutoff/gauge profiles, phase jets, convexity certification
    solvers   sparse CSR operator, square and minimum-norm Krylov solves
    forward   Schrodinger assembly, Dirichlet solve, boundary data maps
    cgo       conjugated operator, remainder solve, phase-adapted solutions
    radon     plane integrals, direction sets, local inverse transform
    pipeline  boundary pairing functional, moment extraction, reconstruction
    scenario  flat key=value scenario files
    cli       command-line entry points
"""

from .geometry import Domain, Frame, Grid, Plane, Region, boundary_decompose
from .fields import ScalarField, BoundaryField, read_qgrid, write_qgrid
from .weights import WeightSpec, phase_jet, hormander_min, lambda_search

__all__ = [
    "Domain",
    "Frame",
    "Grid",
    "Plane",
    "Region",
    "boundary_decompose",
    "ScalarField",
    "BoundaryField",
    "read_qgrid",
    "write_qgrid",
    "WeightSpec",
    "phase_jet",
    "hormander_min",
    "lambda_search",
]

__version__ = "0.1.0"
