"""Loss-gap clustered federated learning: simulator, baselines and bound checks."""
__version__ = "0.1.0"

from .errors import LcflError
from .model import ModelSpec, init_params, predict, loss, gradient, accuracy
from .data import ClientDataset, FederationSpec, build_federation
from .trainer import TrainConfig, local_sgd, warmup_all
from .metrics import DistanceMatrix, loss_gap_matrix, distance_matrix
from .clustering import ClusterAssignment, k_medoids, agglomerative, dbscan, adjusted_rand_index
from .fed import FedConfig, ClusteringConfig, RunLog, fedavg, lcfl_pipeline, ifca, local_only

__all__ = [
    "LcflError", "ModelSpec", "init_params", "predict", "loss", "gradient", "accuracy",
    "ClientDataset", "FederationSpec", "build_federation", "TrainConfig", "local_sgd", "warmup_all",
    "DistanceMatrix", "loss_gap_matrix", "distance_matrix", "ClusterAssignment", "k_medoids",
    "agglomerative", "dbscan", "adjusted_rand_index", "FedConfig", "ClusteringConfig", "RunLog",
    "fedavg", "lcfl_pipeline", "ifca", "local_only",
]
