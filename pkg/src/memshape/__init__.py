"""Memory-graph-guided advantage shaping for PPO on gridworlds."""
from pathlib import Path

from .config import ExperimentConfig
from .estimator import ShapedPPO
from .exceptions import (
    ConfigError,
    DanglingReferenceError,
    DimensionError,
    FormatError,
    InvalidActionError,
    MemshapeError,
    PriorParseError,
    TrainingDivergenceError,
)
from .experiment import compare_runs, emit_curves, run_eval, run_sweep, run_train
from .gridworlds import DoorKey, FrozenLake, make_env
from .memory_graph import MemoryGraph, Step, load_priors
from .ppo import PpoConfig, compute_gae, shape_advantages
from .training import Trainer
from .utility import compute_utility

__version__ = "0.1.0"

PRIORS_DIR = Path(__file__).parent / "priors"

__all__ = [
    "ConfigError", "DanglingReferenceError", "DimensionError", "DoorKey", "ExperimentConfig",
    "FormatError", "FrozenLake", "InvalidActionError", "MemoryGraph", "MemshapeError",
    "PRIORS_DIR", "PpoConfig", "PriorParseError", "ShapedPPO", "Step", "Trainer",
    "TrainingDivergenceError", "compare_runs", "compute_gae", "compute_utility", "emit_curves",
    "load_priors", "make_env", "run_eval", "run_sweep", "run_train", "shape_advantages",
]
