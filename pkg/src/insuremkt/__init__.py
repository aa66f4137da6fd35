"""Insurance menus and service prices when coverage moves the equilibrium price of care."""
from .model_core import ScenarioConfig, ScenarioError, dump_scenario, load_scenario, validate_primitives
from .first_stage import FirstStageSolution, solve_first_stage
from .market import PriceBand, price_band, residual_supply

__all__ = [
    "ScenarioConfig",
    "ScenarioError",
    "load_scenario",
    "dump_scenario",
    "validate_primitives",
    "solve_first_stage",
    "FirstStageSolution",
    "price_band",
    "PriceBand",
    "residual_supply",
]
__version__ = "0.1.0"
