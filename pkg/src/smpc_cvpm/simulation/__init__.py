"""Scenario ingestion and closed-loop simulation."""
from .runner import (CSV_COLUMNS, SCHEMES, SimulationTrace, StepRecord, average_stage_cost, collision_check,
                     load_summary, run_closed_loop, save_trace)
from .scenario import (SCHEMA_VERSION, ObstacleSpec, Road, Scenario, ScenarioError, bundled,
                       bundled_scenarios, load_scenario, parse_scenario)

__all__ = [
    "CSV_COLUMNS", "SCHEMES", "SimulationTrace", "StepRecord", "average_stage_cost", "collision_check",
    "load_summary", "run_closed_loop", "save_trace", "SCHEMA_VERSION", "ObstacleSpec", "Road", "Scenario",
    "ScenarioError", "bundled", "bundled_scenarios", "load_scenario", "parse_scenario",
]
