"""Numerical laboratory for conductivity problems with many small, perfectly
conducting spherical inclusions.

Submodules: :mod:`domain` (domains, configurations), :mod:`grid` (lattice
fields), :mod:`solver` (finite-volume solves), :mod:`analytic` (dipoles,
Green's functions, reflections), :mod:`corrections` (single and pair
corrections, capacity), :mod:`montecarlo` (ensemble studies) and
:mod:`cli`.
"""

__version__ = "0.1.0"

from .domain import (DomainSpec, InclusionConfiguration, cluster_decomposition,  # noqa: E402
                     sample_configuration, unit_ball, unit_box)
from .grid import Grid, GridField, norms  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .solver import (SolveOutput, apply_inverse_L, solve_background,  # noqa: E402
                     solve_effective, solve_with_inclusions)

__all__ = [
    "BACKEND", "DomainSpec", "Grid", "GridField", "InclusionConfiguration", "SolveOutput",
    "apply_inverse_L", "cluster_decomposition", "norms", "sample_configuration",
    "solve_background", "solve_effective", "solve_with_inclusions", "unit_ball", "unit_box",
]
