"""Numerical flows of solutions to linear Fokker-Planck-Kolmogorov equations.

The package builds finite candidate sets of measure-valued solutions,
selects one per initial condition by iterated maximization over a
measure-determining family, verifies the flow property of the result and
probes well-posedness with a second enumeration.
"""
from .curve import SolutionCurve, TimeGrid
from .family import CandidateParams, CandidateSet, generate_candidates, glue, restrict
from .functions import TestFunction, standard_test_family
from .measure import GridSpec, Measure, integrate, normalize, wasserstein1
from .particles import marginals, martingale_residual, simulate_particles
from .problem import Coefficients, Problem, preset, validate_coefficients
from .selection import (Enumeration, FlowTable, MeasureDeterminingFamily, assemble_flow,
                        default_family, project_times, select)
from .solver import narrow_continuity_modulus, solve_forward, weak_residual
from .verify import check_flow_property, wellposedness_probe

__version__ = "0.1.0"

__all__ = [
    "CandidateParams", "CandidateSet", "Coefficients", "Enumeration", "FlowTable", "GridSpec",
    "Measure", "MeasureDeterminingFamily", "Problem", "SolutionCurve", "TestFunction",
    "TimeGrid", "assemble_flow", "check_flow_property", "default_family",
    "generate_candidates", "glue", "integrate", "marginals", "martingale_residual",
    "narrow_continuity_modulus", "normalize", "preset", "project_times", "restrict", "select",
    "simulate_particles", "solve_forward", "standard_test_family", "validate_coefficients",
    "wasserstein1", "weak_residual", "wellposedness_probe",
]
