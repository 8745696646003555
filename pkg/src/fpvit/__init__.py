"""Fingerprint embeddings from a vision transformer fed image and minutiae-map tokens."""

from .errors import (
    ConfigError,
    FormatError,
    FpvitError,
    NumericalError,
    ProtocolError,
    TrainingError,
    ValidationError,
)
from .minutiae import Minutia, MinutiaeMap, MinutiaeSet, build_minutiae_map, recover_minutiae
from .tokenizer import preprocess, tokenize
from .vit import ModelConfig, Schedule, extract_embedding, forward, init_params, train
from .matcher import EmbeddingStore, fuse, search
from .evaluation import Protocol, ScoreSet, tar_at_far

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmbeddingStore",
    "FormatError",
    "FpvitError",
    "Minutia",
    "MinutiaeMap",
    "MinutiaeSet",
    "ModelConfig",
    "NumericalError",
    "Protocol",
    "ProtocolError",
    "Schedule",
    "ScoreSet",
    "TrainingError",
    "ValidationError",
    "build_minutiae_map",
    "extract_embedding",
    "forward",
    "fuse",
    "init_params",
    "preprocess",
    "recover_minutiae",
    "search",
    "tar_at_far",
    "tokenize",
    "train",
]
