"""fedmask: deterministic federated-learning simulator with noisy-client
detection, masked label correction, and robust aggregation."""

from .config import ExperimentConfig, parse_config
from .protocol import ExperimentResult, run_experiment

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "ExperimentResult", "parse_config", "run_experiment", "__version__"]
