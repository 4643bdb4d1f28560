"""Dual proximal gradient and ADMM solvers for viscoplastic cavity flows."""

from .constitutive import ConstitutiveModel, dual_gradient, prox_alg2, stress_from_strain
from .fem import assemble
from .mesh import build_structured_cavity, refine_marked, refine_midpoints
from .optim import SolverConfig, alg2, fista_star, ista_star, solve
from .scenarios import build_scenario, force_driven, lid_driven
from .stokes import StokesKernel

__all__ = [
    "ConstitutiveModel", "SolverConfig", "StokesKernel", "alg2", "assemble", "build_scenario",
    "build_structured_cavity", "dual_gradient", "fista_star", "force_driven", "ista_star",
    "lid_driven", "prox_alg2", "refine_marked", "refine_midpoints", "solve", "stress_from_strain",
]
