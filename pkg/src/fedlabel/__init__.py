"""Federated learning over heterogeneous label sets and model architectures,
exchanging class scores on a shared public dataset instead of weights."""

from .config import ExperimentConfig, load_bundled, load_config
from .experiment import run_experiment

__all__ = ["ExperimentConfig", "load_bundled", "load_config", "run_experiment"]
__version__ = "0.1.0"
