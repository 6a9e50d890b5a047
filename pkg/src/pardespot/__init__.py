"""Parallel DESPOT online POMDP planning."""
from pardespot.model import (
    ContractViolation,
    Model,
    ModelSpec,
    ParticleBelief,
    Scenario,
    StepOutcome,
    domain_names,
    make_model,
    sample_scenarios,
)

__version__ = "0.1.0"

__all__ = [
    "ContractViolation", "Model", "ModelSpec", "ParticleBelief", "Scenario",
    "StepOutcome", "domain_names", "make_model", "sample_scenarios",
]
