"""Scenario plumbing, experiment drivers, the memory oracle and the CLI."""

from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .scenario import RunResult, Scenario, run_scenario, write_artifacts

__all__ = ["ConfigError", "ScenarioConfig", "load_config", "parse_config",
           "RunResult", "Scenario", "run_scenario", "write_artifacts"]
