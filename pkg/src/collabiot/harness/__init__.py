"""Scenario runner and micro-benchmarks."""

from .bench import BENCHMARKS, run_microbench, summarize
from .report import BenchReport, MetricSeries, config_hash
from .scenario import (
    DeviceSpec,
    GuestSpec,
    Scenario,
    ScheduledEvent,
    SetupError,
    Workload,
    load_scenario,
    scenario_from_dict,
)
from .sim import run_scenario

__all__ = [
    "BENCHMARKS", "BenchReport", "DeviceSpec", "GuestSpec", "MetricSeries", "Scenario",
    "ScheduledEvent", "SetupError", "Workload", "config_hash", "load_scenario", "run_microbench",
    "run_scenario", "scenario_from_dict", "summarize",
]
