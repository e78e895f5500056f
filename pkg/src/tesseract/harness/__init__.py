"""Experiment configuration, seeded runs and the command line interface."""

from .config import ConfigError, ExperimentConfig, RunRecord, UnknownKindError
from .experiments import build_env, run_experiment, summarize

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunRecord",
    "UnknownKindError",
    "build_env",
    "run_experiment",
    "summarize",
]
