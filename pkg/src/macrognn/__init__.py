"""Desk-scale multi-rank minibatch GNN training with macrobatch sampling."""

from .graph_store import Graph, attach_features, load_edge_list, make_undirected
from .netsim import CommCounters, Fabric, run_ranks
from .partitioner import Partition, assign_owner, partition_graph
from .sbm import SBMSpec, generate_sbm
from .trainer import TrainConfig, evaluate, train_distributed, train_epoch

__version__ = "0.1.0"

__all__ = [
    "CommCounters",
    "Fabric",
    "Graph",
    "Partition",
    "SBMSpec",
    "TrainConfig",
    "assign_owner",
    "attach_features",
    "evaluate",
    "generate_sbm",
    "load_edge_list",
    "make_undirected",
    "partition_graph",
    "run_ranks",
    "train_distributed",
    "train_epoch",
]
