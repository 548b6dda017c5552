"""Trace extraction: run causal LMs over text and emit RSAT ensemble traces."""

from .extraction import (
    DistortionSettings,
    DocumentSpec,
    ExtractionError,
    ExtractionJob,
    apply_distortion,
    check_tokenizer_consistency,
    extract,
    load_corpus,
    model_label,
    tokenize_document,
    top_k_rows,
)
from .rsat import RawTrace, RsatError, TopkRows, read_trace, write_topk_trace
from .verify import VerifyReport, verify_trace

__version__ = "0.1.0"

__all__ = [
    "DistortionSettings",
    "DocumentSpec",
    "ExtractionError",
    "ExtractionJob",
    "RawTrace",
    "RsatError",
    "TopkRows",
    "VerifyReport",
    "apply_distortion",
    "check_tokenizer_consistency",
    "extract",
    "load_corpus",
    "model_label",
    "read_trace",
    "tokenize_document",
    "top_k_rows",
    "verify_trace",
    "write_topk_trace",
]
