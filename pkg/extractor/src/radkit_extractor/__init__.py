"""Frozen-encoder feature extraction for the radkit retrieval engine."""

from .backbones import (
    Backbone,
    BackboneError,
    DEFAULT_BACKBONE,
    available_backbones,
    load_backbone,
)
from .extract import ExtractorConfig, extract_dataset, extract_single, preprocess

__version__ = "0.1.0"
