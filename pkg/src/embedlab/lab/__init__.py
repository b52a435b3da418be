"""Scenario runner: declarative configs, refinement ladders and reports."""

from .config import ConfigError, Scenario, bundled_scenarios, load_scenario, parse_scenario
from .runner import RunReport, convergence_study, run, scenario_theorem_a

__all__ = [
    "ConfigError",
    "RunReport",
    "Scenario",
    "bundled_scenarios",
    "convergence_study",
    "load_scenario",
    "parse_scenario",
    "run",
    "scenario_theorem_a",
]
