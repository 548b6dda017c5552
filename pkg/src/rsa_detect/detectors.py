"""Scikit-learn style wrappers around the trace scorers.

Each detector consumes a sequence of EnsembleTrace objects. ``score_samples``
returns the raw scores in bits (low means machine-generated), and
``decision_function`` the negated scores so that, as elsewhere in the
ecosystem, larger values point at the positive (artificial) class. ``fit``
calibrates the decision threshold on labeled traces at the configured target
false-positive rate; ``predict`` then returns "human"/"artificial" labels.
Parameters follow the usual get_params/set_params contract.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .capacity import SolverConfig
from .metrics import (
    NEGATIVE_LABEL,
    POSITIVE_LABEL,
    LabeledScores,
    calibrate_threshold,
)
from .scoring import (
    DEFAULT_CLAMP_FLOOR,
    binoculars_score,
    ppl_scores,
    rsa_score,
)

__all__ = ["MixtureCodeDetector", "BinocularsDetector", "PerplexityDetector"]


class _TraceDetector(BaseEstimator):
    """Shared fit/predict plumbing; subclasses implement _score_trace."""

    def _score_trace(self, trace) -> float:
        raise NotImplementedError

    def score_samples(self, traces) -> np.ndarray:
        return np.array([self._score_trace(trace) for trace in traces])

    def decision_function(self, traces) -> np.ndarray:
        return -self.score_samples(traces)

    def fit(self, traces, y):
        scores = self.score_samples(traces)
        labeled = LabeledScores(scores, y)
        labeled.require_both_classes()
        self.threshold_ = calibrate_threshold(labeled, self.target_fpr)
        return self

    def predict(self, traces) -> np.ndarray:
        if not hasattr(self, "threshold_"):
            raise NotFittedError(
                f"{type(self).__name__} must be fitted before calling predict"
            )
        scores = self.score_samples(traces)
        return np.where(scores >= self.threshold_, NEGATIVE_LABEL, POSITIVE_LABEL)


class MixtureCodeDetector(_TraceDetector):
    """Scores documents with the per-position capacity-achieving mixture."""

    def __init__(
        self,
        variant: str = "avg",
        tolerance: float = 1e-9,
        max_iterations: int = 1000,
        clamp_floor: float = DEFAULT_CLAMP_FLOOR,
        target_fpr: float = 0.05,
    ):
        self.variant = variant
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.clamp_floor = clamp_floor
        self.target_fpr = target_fpr

    def _score_trace(self, trace) -> float:
        config = SolverConfig(tolerance=self.tolerance, max_iterations=self.max_iterations)
        return rsa_score(
            trace, variant=self.variant, config=config, clamp_floor=self.clamp_floor
        ).score_bits


class BinocularsDetector(_TraceDetector):
    """Observed-vs-cross codelength ratio between two ensemble members."""

    def __init__(
        self,
        observer: str,
        performer: str,
        clamp_floor: float = DEFAULT_CLAMP_FLOOR,
        target_fpr: float = 0.05,
    ):
        self.observer = observer
        self.performer = performer
        self.clamp_floor = clamp_floor
        self.target_fpr = target_fpr

    def _score_trace(self, trace) -> float:
        return binoculars_score(
            trace, self.observer, self.performer, clamp_floor=self.clamp_floor
        ).score_bits


class PerplexityDetector(_TraceDetector):
    """Mean observed codelength under one model, or averaged over all."""

    def __init__(
        self,
        model: str = "average",
        clamp_floor: float = DEFAULT_CLAMP_FLOOR,
        target_fpr: float = 0.05,
    ):
        self.model = model
        self.clamp_floor = clamp_floor
        self.target_fpr = target_fpr

    def _score_trace(self, trace) -> float:
        records = ppl_scores(trace, clamp_floor=self.clamp_floor)
        if self.model == "average":
            wanted = "ppl_average"
        else:
            wanted = f"ppl_single({self.model})"
        for rec in records:
            if rec.method == wanted:
                return rec.score_bits
        raise ValueError(f"model {self.model!r} not present in trace {trace.doc_id!r}")
