"""Deterministic federated-learning simulator with ensemble constraint targets."""

__version__ = "0.1.0"

from .nn import Batch, Conv, Dense, ModelSpec, Network, Pool, baseline_cnn
from .data import ClientShard, Dataset, PartitionConfig
from .penalties import FisherDiag, Prox, fisher_diag
from .target import TargetTracker, ensemble_target, ensemble_weights
from .orchestrator import (
    AlgorithmVariant,
    FedConfig,
    RoundRecord,
    run_experiment,
)
from .analysis import (
    ExperimentSummary,
    Trajectory2D,
    converged_accuracy,
    pca_trajectory,
    rounds_to_accuracy,
)

__all__ = [
    "AlgorithmVariant", "Batch", "ClientShard", "Conv", "Dataset", "Dense",
    "ExperimentSummary", "FedConfig", "FisherDiag", "ModelSpec", "Network",
    "PartitionConfig", "Pool", "Prox", "RoundRecord", "TargetTracker",
    "Trajectory2D", "baseline_cnn", "converged_accuracy", "ensemble_target",
    "ensemble_weights", "fisher_diag", "pca_trajectory", "rounds_to_accuracy",
    "run_experiment",
]
