"""Desk-scale dual-stage unsupervised cross-view geo-localization.

Stage 1 trains a shared encoder with intra-view cluster contrast and a view
discriminator that pushes every view toward an auxiliary pseudo view. The
drone-to-satellite associations are then purified by heterogeneous graph
filtering, and stage 2 refines the encoder on the resulting pairs.
"""

from .errors import (
    BatchError, ConfigError, DataError, DatasetError, DegenerateVectorError, EmptyMemoryError,
    FormatError, LengthError, ParameterError, ShapeError, StageError, UniABGError, ValidationError,
)
from .feature_store import EmbeddingSet, Manifest, ManifestEntry, ViewTag

__version__ = "0.1.0"

__all__ = [
    "BatchError", "ConfigError", "DataError", "DatasetError", "DegenerateVectorError",
    "EmptyMemoryError", "EmbeddingSet", "FormatError", "LengthError", "Manifest", "ManifestEntry",
    "ParameterError", "ShapeError", "StageError", "UniABGError", "ValidationError", "ViewTag",
]
