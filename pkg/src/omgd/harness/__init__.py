from .config import ExperimentConfig, load_experiment
from .runner import run_experiment

__all__ = ["ExperimentConfig", "load_experiment", "run_experiment"]
