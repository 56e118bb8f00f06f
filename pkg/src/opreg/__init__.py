"""Operator regression for aligned and unaligned observation data.

DeepONet (dot / Cartesian merge), POD-DeepONet, Decoder-DeepONet and
Multi-Decoder-DeepONet on a numpy reverse-mode autodiff core, with a Darcy
flow data factory and a comparison harness.
"""

from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    GraphError,
    LayoutError,
    NumericalError,
    OpregError,
    ShapeError,
    TruncatedError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "CheckpointError",
    "ConfigError",
    "DataFormatError",
    "GraphError",
    "LayoutError",
    "NumericalError",
    "OpregError",
    "ShapeError",
    "TruncatedError",
    "VersionError",
]
