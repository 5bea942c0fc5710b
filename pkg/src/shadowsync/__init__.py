"""Multi-threaded DLRM-lite CTR training with shadow-thread synchronization."""
from .data import DataSpec, OnePassReader, generate_batch
from .experiment import ExperimentConfig, eval_ne, run_experiment, run_sweep, sweep_configs
from .metrics import RunMetrics, normalized_entropy
from .model import DenseParams, ModelArch
from .runtime import ClusterSpec, TrainOptions, run_training, sequential_reference
from .sync import SyncConfig

__all__ = [
    "ClusterSpec", "DataSpec", "DenseParams", "ExperimentConfig", "ModelArch", "OnePassReader",
    "RunMetrics", "SyncConfig", "TrainOptions", "eval_ne", "generate_batch", "normalized_entropy",
    "run_experiment", "run_sweep", "run_training", "sequential_reference", "sweep_configs",
]

__version__ = "0.1.0"
