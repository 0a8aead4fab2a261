"""duflow: unsupervised optical flow at desk scale.

A dilated, densely connected convolutional flow estimator trained without
labels through an occlusion-aware census reconstruction loss, built on a
small numpy tape-autodiff kernel. See README.md for a tour; the demos/
directory walks through each capability.
"""

from .errors import DuflowError
from .losses import (
    CensusParams,
    CharbonnierParams,
    LossReport,
    LossWeights,
    OcclusionMask,
    OcclusionParams,
    occlusion_masks,
    total_loss,
)
from .network import FlowNetwork, LayerSpec, NetworkConfig, build_network, load_network, save_network
from .scenes import AugmentParams, SceneSpec, augment, generate_pair, read_dataset, write_dataset
from .tensor import Bias, ConvSpec, FilterBank, Graph, Tensor4
from .training import TrainConfig, bidirectional_step, parse_config, predict_flow, train
from .warp import sample_flow_at_flow, warp_image

__version__ = "0.1.0"

__all__ = [
    "AugmentParams",
    "Bias",
    "CensusParams",
    "CharbonnierParams",
    "ConvSpec",
    "DuflowError",
    "FilterBank",
    "FlowNetwork",
    "Graph",
    "LayerSpec",
    "LossReport",
    "LossWeights",
    "NetworkConfig",
    "OcclusionMask",
    "OcclusionParams",
    "SceneSpec",
    "Tensor4",
    "TrainConfig",
    "__version__",
    "augment",
    "bidirectional_step",
    "build_network",
    "generate_pair",
    "load_network",
    "occlusion_masks",
    "parse_config",
    "predict_flow",
    "read_dataset",
    "sample_flow_at_flow",
    "save_network",
    "total_loss",
    "train",
    "warp_image",
    "write_dataset",
]
