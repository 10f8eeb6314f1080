"""Orchestration: simulators, training runs, paired experiments, timings."""

from .config import ExperimentConfig, hard_bin_scenario
from .experiment import ExperimentResult, PairResult, hard_bin_mass, run_feedback_experiment
from .runtime import TimingTable, measure_runtimes, render_preview
from .simulator import Simulator
from .training import RunReport, run_training

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "PairResult",
    "RunReport",
    "Simulator",
    "TimingTable",
    "hard_bin_mass",
    "hard_bin_scenario",
    "measure_runtimes",
    "render_preview",
    "run_feedback_experiment",
    "run_training",
]
