"""Adaptive multi-domain learning on a frozen, block-partitioned ResNet.

Each domain adds parallel 1x1 adapters, its own batch normalization and one
classifier head per block; at inference the cheapest exit whose accuracy is
close enough to the full network's is used.
"""

from .errors import AMDLError, ChecksumError, DimensionError, FormatError, NumericError
from .model import (
    BaseNetwork,
    DomainAdapterSet,
    ExitTopology,
    NetworkConfig,
    ParamLedger,
    attach_domain,
    build_base,
    count_params,
    forward_multi_exit,
    freeze_base,
    init_from_base,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetContainer, generate_synthetic, load_dataset, prepare_domain, save_dataset
from .training import TrainConfig, TrainHistory, evaluate, train_base, train_domain
from .exit_policy import AccuracyTable, best_row, select_exit

__version__ = "0.1.0"

__all__ = [
    "AMDLError",
    "ChecksumError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "BaseNetwork",
    "DomainAdapterSet",
    "ExitTopology",
    "NetworkConfig",
    "ParamLedger",
    "attach_domain",
    "build_base",
    "count_params",
    "forward_multi_exit",
    "freeze_base",
    "init_from_base",
    "load_checkpoint",
    "save_checkpoint",
    "DatasetContainer",
    "generate_synthetic",
    "load_dataset",
    "prepare_domain",
    "save_dataset",
    "TrainConfig",
    "TrainHistory",
    "evaluate",
    "train_base",
    "train_domain",
    "AccuracyTable",
    "best_row",
    "select_exit",
]
