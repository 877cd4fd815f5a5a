"""Configuration, experiment drivers and the command line interface."""

from .config import EXPERIMENTS, ExperimentConfig, load_config, validate_config
from .experiments import Assertion, run_experiment

__all__ = ["EXPERIMENTS", "Assertion", "ExperimentConfig", "load_config", "run_experiment", "validate_config"]
