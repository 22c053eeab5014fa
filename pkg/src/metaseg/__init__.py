"""Meta-learning and transfer learning for multi-task semantic segmentation.

Episodic and instance-level samplers over heterogeneous segmentation
sources, a mini U-Net with per-task heads evaluated functionally over an
explicit parameter set, first-order MAML and transfer-learning trainers, and
dataset-aggregated mIoU evaluation.
"""

from .errors import (
    ConfigError,
    ContractError,
    EmptyEvaluationError,
    IngestError,
    LabelRangeError,
    MetasegError,
    NumericError,
    RoutingError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "EmptyEvaluationError",
    "IngestError",
    "LabelRangeError",
    "MetasegError",
    "NumericError",
    "RoutingError",
    "ShapeError",
]
