"""Static PE feature extraction and hierarchical malware classification."""

__version__ = "0.1.0"

from .kernels import BACKEND
from .pe_parser import NotPE, extract_record, parse_pe
from .pipeline import classify, classify_many, load_pipeline, save_pipeline, train_pipeline
from .record import RawFeatureRecord
from .vectorizer import FeatureLayout, LayoutMismatch, vectorize

__all__ = [
    "BACKEND",
    "FeatureLayout",
    "LayoutMismatch",
    "NotPE",
    "RawFeatureRecord",
    "classify",
    "classify_many",
    "extract_record",
    "load_pipeline",
    "parse_pe",
    "save_pipeline",
    "train_pipeline",
    "vectorize",
]
