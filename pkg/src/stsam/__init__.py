"""Spatial-temporal self-attention forecasting of regional inflow and outflow."""

from .dataio import DatasetMeta, FlowDataset, Sample, SyntheticSpec, generate_synthetic
from .model import HyperParams, forward, init_params
from .numerics import Tensor, backward
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DatasetMeta",
    "FlowDataset",
    "HyperParams",
    "Sample",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "fit",
    "forward",
    "generate_synthetic",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]
