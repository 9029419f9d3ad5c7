"""Desk-scale interleaved text/image generation with modality-routed adapters."""

from .seqcore import (
    DatasetInstance,
    ImageSegment,
    InterleavedSequence,
    Modality,
    ModelConfig,
    PatchGrid,
    SpecialToken,
    TextSegment,
    flatten,
    load_config,
    paper_preset,
    read_corpus,
    write_corpus,
)
from .model import VLGModel, build_training_example
from .decode import GenerationConfig, generate

__version__ = "0.1.0"

__all__ = [
    "DatasetInstance", "ImageSegment", "InterleavedSequence", "Modality",
    "ModelConfig", "PatchGrid", "SpecialToken", "TextSegment", "flatten",
    "load_config", "paper_preset", "read_corpus", "write_corpus",
    "VLGModel", "build_training_example", "GenerationConfig", "generate",
    "__version__",
]
