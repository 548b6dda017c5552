"""Ensemble detection of machine-generated text via minimax mixture codes.

Documents are scored from precomputed traces of per-model next-token
distributions: each position's model ensemble is combined through its
capacity-achieving mixture, and the gap between the observed token's mixture
codelength and the ensemble's expected codelength separates human text
(large gap) from text produced by family-like generators (small gap).
"""

from .capacity import MixtureSolution, SolverConfig, minimax_regret_oracle, solve
from .detectors import BinocularsDetector, MixtureCodeDetector, PerplexityDetector
from .info import (
    TokenChannel,
    codelength,
    conditional_mutual_information,
    cross_entropy,
    entropy,
    kl_divergence,
)
from .metrics import LabeledScores, auroc, calibrate_threshold, tpr_at_fpr
from .scoring import (
    DistortionParams,
    EnsembleTrace,
    ScoreRecord,
    TokenScore,
    UnigramModel,
    binoculars_score,
    distort,
    extend_trace_with_unigram,
    ppl_scores,
    rsa_score,
    rsa_token_score,
    unigram_train,
)
from .trace_io import (
    ManifestRecord,
    load_channel_json,
    load_manifest,
    load_trace,
    restrict_trace_topk,
    write_manifest,
    write_trace,
)
from .validation import TraceFormatError, UndefinedScoreError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "BinocularsDetector",
    "DistortionParams",
    "EnsembleTrace",
    "LabeledScores",
    "ManifestRecord",
    "MixtureCodeDetector",
    "MixtureSolution",
    "PerplexityDetector",
    "ScoreRecord",
    "SolverConfig",
    "TokenChannel",
    "TokenScore",
    "TraceFormatError",
    "UndefinedScoreError",
    "UnigramModel",
    "ValidationError",
    "auroc",
    "binoculars_score",
    "calibrate_threshold",
    "codelength",
    "conditional_mutual_information",
    "cross_entropy",
    "distort",
    "entropy",
    "extend_trace_with_unigram",
    "kl_divergence",
    "load_channel_json",
    "load_manifest",
    "load_trace",
    "minimax_regret_oracle",
    "ppl_scores",
    "restrict_trace_topk",
    "rsa_score",
    "rsa_token_score",
    "solve",
    "tpr_at_fpr",
    "unigram_train",
    "write_manifest",
    "write_trace",
]
