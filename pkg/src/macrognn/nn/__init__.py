from .functional import segment_sum, softmax_xent
from .layers import (
    BatchNorm,
    Dropout,
    GCNConv,
    GINConv,
    LayerConfigError,
    PhaseError,
    ReLU,
    SAGEConv,
    Scratch,
)
from .model import GNNModel, ModelConfig, load_checkpoint, read_checkpoint, save_checkpoint
from .optim import Adam

__all__ = [
    "Adam",
    "BatchNorm",
    "Dropout",
    "GCNConv",
    "GINConv",
    "GNNModel",
    "LayerConfigError",
    "ModelConfig",
    "PhaseError",
    "ReLU",
    "SAGEConv",
    "Scratch",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    "segment_sum",
    "softmax_xent",
]
