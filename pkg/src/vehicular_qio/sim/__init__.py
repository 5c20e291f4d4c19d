"""Desk-scale co-simulator: world construction, the run loop and ablations."""

from .engine import MetricsReport, run, simulate
from .scenarios import SCALES, SCENARIOS, VARIANTS, ScenarioConfig, scenario
from .world import World, build_world

__all__ = [
    "MetricsReport",
    "SCALES",
    "SCENARIOS",
    "ScenarioConfig",
    "VARIANTS",
    "World",
    "build_world",
    "run",
    "scenario",
    "simulate",
]
