"""Multi-scale densely connected U-Net toolkit with power-of-two quantization."""

from ._mdunet import (
    ArchConfig,
    CheckpointError,
    ConfigError,
    Model,
    ShapeError,
    build_mdunet,
    build_unet,
    codebook,
    quant_bounds,
    quantize_value,
    run_cli,
)

__all__ = [
    "ArchConfig",
    "CheckpointError",
    "ConfigError",
    "Model",
    "ShapeError",
    "build_mdunet",
    "build_unet",
    "codebook",
    "quant_bounds",
    "quantize_value",
    "run_cli",
]
