"""Experiment harness: config, commands, metrics and the ``diffclass`` CLI."""

from .config import ConfigError, ExperimentConfig
from .metrics import MetricsReport

__all__ = ["ConfigError", "ExperimentConfig", "MetricsReport"]
