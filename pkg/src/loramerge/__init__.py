"""Training-free merging of LoRA adapters with singular-value diagnostics."""

__version__ = "0.1.0"

from .adapter_io import AdapterSet, LoraPair, load_adapter, save_adapter, validate_compatibility
from .errors import FormatError, LoraMergeError, NumericError, ShapeError, ValidationError
from .merge import MergeConfig, compose_delta, merge, robust_merge

__all__ = [
    "AdapterSet",
    "LoraPair",
    "load_adapter",
    "save_adapter",
    "validate_compatibility",
    "MergeConfig",
    "merge",
    "robust_merge",
    "compose_delta",
    "LoraMergeError",
    "ValidationError",
    "ShapeError",
    "FormatError",
    "NumericError",
]
