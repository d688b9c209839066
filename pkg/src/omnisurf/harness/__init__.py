"""Experiment orchestration: configs, run loops, metrics, sweeps and the CLI."""

from .config import CatalogConfig, MetricsConfig, RunConfig, ScenarioConfig, desk_config
from .metrics import detect_convergence, short_term_average, tail_mean
from .runner import RunResult, run, run_algorithm1, run_baseline
from .sweep import report, sweep

__all__ = [
    "CatalogConfig", "MetricsConfig", "RunConfig", "ScenarioConfig", "desk_config",
    "detect_convergence", "short_term_average", "tail_mean",
    "RunResult", "run", "run_algorithm1", "run_baseline", "report", "sweep",
]
