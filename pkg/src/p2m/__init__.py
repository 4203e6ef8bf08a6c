"""Design-operation co-optimization for renewable-powered methanol plants.

Subsystems:

* :mod:`p2m.params`, :mod:`p2m.plant` - plant physics and technical constants
* :mod:`p2m.lp` - full-horizon dispatch LP, the operational ground truth
* :mod:`p2m.scenarios`, :mod:`p2m.desk` - wind/price scenario machinery
* :mod:`p2m.agent` - goal-conditioned actor-critic dispatch policy
* :mod:`p2m.cooptim` - chance-constrained multi-objective design search
* :mod:`p2m.ingest` - external wind/price data acquisition
* :mod:`p2m.cli` - the ``p2m`` command-line entry point
"""

from .params import CARBON_TAX, TechnicalParams, for_region, load_params
from .plant import (
    HOURS, Action, ExogenousStep, PlantState, StepOutcome, SystemDesign,
    Trajectory, clamp_action, derive_pem_capacity, rollout, step,
)
from .scenarios import FeatureVector, Scenario

__all__ = [
    "CARBON_TAX", "TechnicalParams", "for_region", "load_params",
    "HOURS", "Action", "ExogenousStep", "PlantState", "StepOutcome",
    "SystemDesign", "Trajectory", "clamp_action", "derive_pem_capacity",
    "rollout", "step", "FeatureVector", "Scenario",
]
