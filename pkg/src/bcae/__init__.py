"""Bicephalous convolutional autoencoder for sparse 3D TPC ADC frames."""

from .codec import CompressedContainer, compress, compression_ratio, decompress
from .losses import combine_output, focal_loss, forward_transform, inverse_transform, soft_label
from .network import NetworkConfig, build_model, decode, encode

__version__ = "0.1.0"

__all__ = [
    "CompressedContainer",
    "NetworkConfig",
    "build_model",
    "combine_output",
    "compress",
    "compression_ratio",
    "decode",
    "decompress",
    "encode",
    "focal_loss",
    "forward_transform",
    "inverse_transform",
    "soft_label",
]
