"""Multi-channel autoencoder (MTC-AE) emotion classifier on acoustic functionals."""

from .model import Architecture, MtcAeModel, TrainConfig, build_model, forward, fuse, predict
from .sdae import CorruptionSpec, SdaeConfig, pretrain_stack, train_dae

__all__ = [
    "Architecture",
    "CorruptionSpec",
    "MtcAeModel",
    "SdaeConfig",
    "TrainConfig",
    "build_model",
    "forward",
    "fuse",
    "predict",
    "pretrain_stack",
    "train_dae",
]
__version__ = "0.1.0"
