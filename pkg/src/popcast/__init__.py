"""Age-structured population forecasting: a finite-difference reference
solver, a physics-informed neural surrogate with an optional recurrent
refinement, local explanations, and a scenario runner."""

from .demography import AgeTimeGrid, FertilityModel, MortalityModel, PopulationGrid
from .scenarios import ScenarioConfig, builtin_scenarios, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AgeTimeGrid",
    "FertilityModel",
    "MortalityModel",
    "PopulationGrid",
    "ScenarioConfig",
    "builtin_scenarios",
    "run_scenario",
]
