"""Non-autoregressive joint intent detection and slot filling.

A Transformer encoder with relative-position self-attention predicts the
intent and all slot tags in one parallel pass; a training-only causal tag
decoder and a mid-encoder result-refinement step supply the sequential
dependency information that one-pass tagging otherwise lacks.
"""

from .corpus import Batch, Example, Vocabulary, encode_batch, load_split
from .errors import Error
from .evaluation import (
    ChunkSpan,
    ErrorReport,
    classify_unc_errors,
    extract_chunks,
    find_uncoordinated,
    intent_accuracy,
    overall_accuracy,
    slot_f1,
)
from .model import ModelConfig, Prediction, SluTransformer
from .training import RunSettings, evaluate_model, load_model, predict, train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ChunkSpan",
    "Error",
    "ErrorReport",
    "Example",
    "ModelConfig",
    "Prediction",
    "RunSettings",
    "SluTransformer",
    "Vocabulary",
    "classify_unc_errors",
    "encode_batch",
    "evaluate_model",
    "extract_chunks",
    "find_uncoordinated",
    "intent_accuracy",
    "load_model",
    "load_split",
    "overall_accuracy",
    "predict",
    "slot_f1",
    "train",
    "__version__",
]
