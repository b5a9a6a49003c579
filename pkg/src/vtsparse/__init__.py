"""Text-guided visual token sparsification on a deterministic toy decoder."""
from .errors import ConfigError, ShapeError, VTSparseError
from .numerics import OpCounter
from .sparsify import Sparsifier, SparsifyConfig
from .toy_vlm import ModelConfig, TokenSequence, build_model, prefill

__all__ = [
    "ConfigError",
    "ModelConfig",
    "OpCounter",
    "ShapeError",
    "Sparsifier",
    "SparsifyConfig",
    "TokenSequence",
    "VTSparseError",
    "build_model",
    "prefill",
]
__version__ = "0.1.0"
