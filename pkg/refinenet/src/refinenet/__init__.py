"""Learned refinement of dual-spectral CT reconstructions.

A nested U-Net whose convolutions are input-adaptive mixtures of expert
kernels.  It trains on dataset directories produced by the simulation
toolkit (iterative reconstructions as inputs, phantoms as targets) and
writes refined images in the same tensor-container format.
"""

from .data import (PairDataset, collate, normalization_scales, read_manifest,
                   split_entries)
from .infer import load_checkpoint, refine_dataset, refine_pair
from .layers import (AttentionGate, DynamicConv2d, DynamicConvSpec,
                     ResidualDynamicBlock, temperature_softmax)
from .network import NetworkConfig, RefinerNet, desk_scale_config
from .tensorio import read_tensor, write_tensor
from .train import (TrainConfig, channel_mse, pair_loss, temperature_at,
                    train)

__version__ = "0.1.0"

__all__ = [
    "AttentionGate",
    "DynamicConv2d",
    "DynamicConvSpec",
    "NetworkConfig",
    "PairDataset",
    "RefinerNet",
    "ResidualDynamicBlock",
    "TrainConfig",
    "__version__",
    "channel_mse",
    "collate",
    "desk_scale_config",
    "load_checkpoint",
    "normalization_scales",
    "pair_loss",
    "read_manifest",
    "read_tensor",
    "refine_dataset",
    "refine_pair",
    "split_entries",
    "temperature_at",
    "temperature_softmax",
    "train",
    "write_tensor",
]
