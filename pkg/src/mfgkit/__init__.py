"""Deterministic mean field games with displacement monotone data.

Empirical measures and exact optimal transport, model data with Legendre
duality, sampled monotonicity audits, a semi-Lagrangian HJB solver, a
particle continuity solver, the damped Picard fixed-point loop and a
shooting solver for the characteristic system.
"""

__version__ = "0.1.0"

from .errors import MfgError
from .measures import ParticleMeasure, from_samples, gaussian_measure, optimal_coupling, wasserstein
from .model import MfgProblem, builtin, check_gradients, legendre
from .hjb import SpaceTimeGrid, ValueField, audit_regularity, solve_hjb
from .flow import MeasureFlow, integrate_flow, velocity_from_value
from .mfg import MfgSolution, SolveParams, StabilityReport, apply_S, solve, stability_experiment
from .hamsys import CharacteristicPath, consistency_check, shoot

__all__ = [
    "MfgError", "ParticleMeasure", "from_samples", "gaussian_measure", "optimal_coupling",
    "wasserstein", "MfgProblem", "builtin", "check_gradients", "legendre", "SpaceTimeGrid",
    "ValueField", "audit_regularity", "solve_hjb", "MeasureFlow", "integrate_flow",
    "velocity_from_value", "MfgSolution", "SolveParams", "StabilityReport", "apply_S", "solve",
    "stability_experiment", "CharacteristicPath", "consistency_check", "shoot",
]
