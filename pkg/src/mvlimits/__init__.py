"""Desk-scale numerics for convex risk functionals of mean-field diffusions.

The package simulates interacting particle systems for (controlled)
mean-field SDEs, evaluates the associated convex risk functionals by three
independent routes (closed-form log-moment generation, backward regression,
dual control ascent), solves the matching zero-noise control problems, and
wires everything into reproducible command-line experiments that verify the
limits connecting them.
"""

from mvlimits.costs import (
    ConjugatePair,
    ConvexityError,
    CostFunction,
    OffsetTerm,
    biconjugate,
    legendre_transform,
    pasch_hausdorff,
    truncate_pair,
    viscosity_scale,
)

__version__ = "0.1.0"

__all__ = [
    "ConjugatePair",
    "ConvexityError",
    "CostFunction",
    "OffsetTerm",
    "biconjugate",
    "legendre_transform",
    "pasch_hausdorff",
    "truncate_pair",
    "viscosity_scale",
    "__version__",
]
