"""Adaptive k-means-friendly convolutional autoencoder for voxel clustering."""

from .network import NetworkConfig, ConvAutoencoder, build_autoencoder
from .training import (
    Centroids,
    TrainReport,
    assign,
    encode,
    export_report,
    init_centroids,
    joint_loss,
    joint_train,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    set_deterministic,
)

__all__ = [
    "NetworkConfig",
    "ConvAutoencoder",
    "build_autoencoder",
    "Centroids",
    "TrainReport",
    "assign",
    "encode",
    "export_report",
    "init_centroids",
    "joint_loss",
    "joint_train",
    "load_checkpoint",
    "pretrain",
    "save_checkpoint",
    "set_deterministic",
]
