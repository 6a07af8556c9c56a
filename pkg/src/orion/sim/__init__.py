"""Deterministic simulation harness: engine, faults, clients, checks and CLI."""

from .checks import check_complexity, check_liveness, check_safety, check_steps
from .config import FaultBehavior, ScenarioConfig
from .runner import RunResult, run_scenario

__all__ = ["FaultBehavior", "RunResult", "ScenarioConfig", "check_complexity", "check_liveness",
           "check_safety", "check_steps", "run_scenario"]
