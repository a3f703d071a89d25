"""Resilient consensus for constrained multi-agent systems via distributed MPC
with receiver-side attack detection."""

from .engine import SimResult, disagreement, run, validate_theorem1
from .scenario import Scenario, ScenarioError, bundled_scenario_path, load_scenario

__all__ = [
    "Scenario",
    "ScenarioError",
    "SimResult",
    "bundled_scenario_path",
    "disagreement",
    "load_scenario",
    "run",
    "validate_theorem1",
]

__version__ = "0.1.0"
