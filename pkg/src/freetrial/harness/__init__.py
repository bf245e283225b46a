"""Baselines, metrics, experiment runners, configuration and the CLI."""

from .baselines import BASELINES, rank_baseline_users, run_baseline
from .cli import cli_main
from .config import Config
from .experiments import rq1_sweep, rq3_depth_sweep
from .metrics import MetricsReport, eval_ranking

__all__ = ["BASELINES", "Config", "MetricsReport", "cli_main", "eval_ranking",
           "rank_baseline_users", "rq1_sweep", "rq3_depth_sweep", "run_baseline"]
