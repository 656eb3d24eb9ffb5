"""Topic attention neural topic models (TAN-NTM)."""

from .corpus import CorpusSplit, EncodedDocument, PreprocessConfig, Vocabulary
from .model import ForwardTrace, ModelConfig, TANNTM, Variant

__version__ = "0.1.0"

__all__ = ["CorpusSplit", "EncodedDocument", "PreprocessConfig", "Vocabulary",
           "ForwardTrace", "ModelConfig", "TANNTM", "Variant"]
