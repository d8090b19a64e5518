"""Self-supervised dense tracking.

Correspondence learned by frame reconstruction, a momentum-updated memory
bank for mask propagation, and per-video online adaptation.
"""

from .errors import (
    AnnotationError,
    ConfigError,
    CoverageError,
    DenseTrackError,
    LoadError,
    NumericError,
    OrderingError,
    ParameterError,
    RangeError,
    SessionError,
    ShapeError,
    SizeError,
    WarpError,
)
from .ingest import Frame, MaskProbMap, Sequence, load_sequence
from .config import PipelineConfig
from .estimators import DenseTracker, OnlineAdapter

__all__ = [
    "AnnotationError",
    "ConfigError",
    "CoverageError",
    "DenseTracker",
    "DenseTrackError",
    "Frame",
    "LoadError",
    "MaskProbMap",
    "NumericError",
    "OnlineAdapter",
    "OrderingError",
    "ParameterError",
    "PipelineConfig",
    "RangeError",
    "Sequence",
    "SessionError",
    "ShapeError",
    "SizeError",
    "WarpError",
    "load_sequence",
]

__version__ = "0.1.0"
