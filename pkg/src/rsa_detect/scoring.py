"""Document-level detection scores over precomputed ensemble traces.

A trace holds, for every position t of a document, the observed token and the
M per-model next-token distributions (one TokenChannel per position). The
scores defined here never touch a model; they are pure functions of traces.

The headline score contrasts the codelength of the observed token under the
capacity-achieving mixture q* with the expected codelength the mixture assigns
to tokens drawn from the ensemble members themselves:

    s_t = -log2 q*(w_t)  -  agg_m  sum_y p(y|m) * (-log2 q*(y))

where agg is the model average ("avg" variant) or the maximum ("max" variant;
only the aggregated term changes, the observed-token term has no model sum).
The document score is the mean of s_t. Low scores indicate that the text looks
machine-generated to the ensemble; raw scores are emitted in bits and any
thresholding lives in the metrics layer.

Zero-probability policy: real traces can assign the observed token zero mass,
so every codelength of the mixture or of a single model is evaluated on
probabilities floored at ``clamp_floor`` (default 1e-12), and affected tokens
are flagged and counted on the returned record.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .capacity import DEFAULT_CONFIG, MixtureSolution, SolverConfig, solve
from .info import TokenChannel
from .validation import (
    UndefinedScoreError,
    ValidationError,
    as_distribution,
    check_token_index,
)

__all__ = [
    "EnsembleTrace",
    "ScoreRecord",
    "TokenScore",
    "DistortionParams",
    "UnigramModel",
    "rsa_token_score",
    "rsa_score",
    "binoculars_score",
    "ppl_scores",
    "distort",
    "unigram_train",
    "extend_trace_with_unigram",
    "METHOD_RSA_AVG",
    "METHOD_RSA_MAX",
    "METHOD_PPL_AVERAGE",
    "METHOD_QSTAR_LOGPROB",
    "ppl_single_method",
    "binoculars_method",
]

DEFAULT_CLAMP_FLOOR = 1e-12

METHOD_RSA_AVG = "rsa_avg"
METHOD_RSA_MAX = "rsa_max"
METHOD_PPL_AVERAGE = "ppl_average"
METHOD_QSTAR_LOGPROB = "qstar_logprob"

_VARIANTS = ("avg", "max")


def ppl_single_method(model_id: str) -> str:
    return f"ppl_single({model_id})"


def binoculars_method(observer: str, performer: str) -> str:
    return f"binoculars(obs={observer},perf={performer})"


@dataclass(frozen=True)
class EnsembleTrace:
    """One document's observed tokens plus per-model per-position distributions.

    ``distributions`` has shape (T, M, N): position t's channel is the M x N
    slice ``distributions[t]`` with rows in ``model_ids`` order. ``provenance``
    carries loader metadata (storage mode, tail policy) and is not validated.
    """

    doc_id: str
    model_ids: tuple[str, ...]
    observed_tokens: np.ndarray
    distributions: np.ndarray
    vocab_size: int | None = None
    provenance: Mapping | None = None

    def __post_init__(self):
        dist = np.asarray(self.distributions, dtype=np.float64)
        if dist.ndim != 3:
            raise ValidationError(f"distributions must be (T, M, N), got shape {dist.shape}")
        t, m, n = dist.shape
        if t < 1 or m < 1 or n < 1:
            raise ValidationError(f"degenerate trace shape {dist.shape}")
        if not np.all(np.isfinite(dist)):
            raise ValidationError("trace distributions contain non-finite entries")
        if np.any(dist < 0):
            raise ValidationError("trace distributions contain negative entries")
        err = np.abs(dist.sum(axis=2) - 1.0).max()
        if err > 1e-9:
            raise ValidationError(f"trace rows deviate from unit mass by up to {err:.3e}")
        observed = np.asarray(self.observed_tokens, dtype=np.int64)
        if observed.shape != (t,):
            raise ValidationError(
                f"observed_tokens shape {observed.shape} does not match T={t}"
            )
        if observed.min() < 0 or observed.max() >= n:
            raise ValidationError("observed token index outside vocabulary")
        ids = tuple(self.model_ids)
        if len(ids) != m:
            raise ValidationError(f"got {len(ids)} model ids for {m} rows")
        if self.vocab_size is not None and self.vocab_size != n:
            raise ValidationError(f"vocab_size {self.vocab_size} does not match N={n}")
        object.__setattr__(self, "distributions", dist)
        object.__setattr__(self, "observed_tokens", observed)
        object.__setattr__(self, "model_ids", ids)
        object.__setattr__(self, "vocab_size", n)

    @property
    def num_tokens(self) -> int:
        return self.distributions.shape[0]

    @property
    def num_models(self) -> int:
        return self.distributions.shape[1]

    def channel_at(self, t: int) -> TokenChannel:
        return TokenChannel(self.distributions[t], self.model_ids)


@dataclass(frozen=True)
class TokenScore:
    """Per-position score with the mixture solution that produced it."""

    score_bits: float
    solution: MixtureSolution
    clamped: bool = False
    zero_column: bool = False


@dataclass
class ScoreRecord:
    """One document's score under one method.

    ``per_token``, when requested, holds one TokenScore per position (methods
    without a per-position mixture leave it None). ``n_clamped`` counts tokens
    that hit the zero-probability floor, ``n_zero_observed`` the subset whose
    observed token had zero mass under every model, and ``n_unconverged`` the
    positions whose mixture solver hit its iteration budget.
    """

    doc_id: str
    method: str
    score_bits: float
    per_token: list[TokenScore] | None = None
    n_clamped: int = 0
    n_zero_observed: int = 0
    n_unconverged: int = 0


@dataclass(frozen=True)
class DistortionParams:
    """Temperature plus nucleus-filter settings applied to raw logits."""

    temperature: float = 1.0
    top_p: float = 1.0
    smoothing_eps: float = 0.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature!r}")
        if not 0 < self.top_p <= 1:
            raise ValidationError(f"top_p must be in (0, 1], got {self.top_p!r}")
        if self.smoothing_eps < 0:
            raise ValidationError(f"smoothing_eps must be >= 0, got {self.smoothing_eps!r}")


@dataclass(frozen=True)
class UnigramModel:
    """Position-independent token distribution estimated from count ratios."""

    token_probs: np.ndarray
    training_token_count: int
    eps: float

    def __post_init__(self):
        object.__setattr__(
            self, "token_probs", as_distribution(self.token_probs, name="token_probs")
        )

    @property
    def vocab_size(self) -> int:
        return self.token_probs.size


class _MixtureTables:
    """Per-channel solve results shared across positions of one scoring call.

    Keyed by the raw bytes of the channel matrix, so traces whose positions
    repeat a channel (constant-row ensembles such as unigram members) pay for
    one solve instead of T.
    """

    def __init__(self, config: SolverConfig, clamp_floor: float):
        self.config = config
        self.clamp_floor = clamp_floor
        self._cache: dict[bytes, tuple] = {}

    def lookup(self, rows: np.ndarray):
        key = rows.tobytes()
        entry = self._cache.get(key)
        if entry is None:
            sol = solve(rows, self.config)
            codelengths = -np.log2(np.maximum(sol.mixture, self.clamp_floor))
            ce = rows @ codelengths
            entry = (sol, codelengths, float(ce.mean()), float(ce.max()))
            self._cache[key] = entry
        return entry


def _token_score(tables: _MixtureTables, rows: np.ndarray, observed: int, variant: str) -> TokenScore:
    sol, codelengths, ce_mean, ce_max = tables.lookup(rows)
    aggregate = ce_mean if variant == "avg" else ce_max
    clamped = bool(sol.mixture[observed] < tables.clamp_floor)
    return TokenScore(
        score_bits=float(codelengths[observed]) - aggregate,
        solution=sol,
        clamped=clamped,
        zero_column=clamped and not rows[:, observed].any(),
    )


def _check_variant(variant: str) -> str:
    if variant not in _VARIANTS:
        raise ValidationError(f"variant must be one of {_VARIANTS}, got {variant!r}")
    return variant


def rsa_token_score(
    channel,
    observed: int,
    variant: str = "avg",
    config: SolverConfig = DEFAULT_CONFIG,
    clamp_floor: float = DEFAULT_CLAMP_FLOOR,
) -> TokenScore:
    """Score a single position against its capacity-achieving mixture.

    Solves the channel, then returns the observed token's mixture codelength
    minus the averaged (or maximal) expected mixture codelength over models.
    """
    _check_variant(variant)
    channel = channel if isinstance(channel, TokenChannel) else TokenChannel(np.asarray(channel))
    observed = check_token_index(observed, channel.vocab_size, name="observed")
    tables = _MixtureTables(config, clamp_floor)
    return _token_score(tables, channel.rows, observed, variant)


def rsa_score(
    trace: EnsembleTrace,
    variant: str = "avg",
    config: SolverConfig = DEFAULT_CONFIG,
    per_token: bool = False,
    clamp_floor: float = DEFAULT_CLAMP_FLOOR,
) -> ScoreRecord:
    """Mean per-token mixture-code score of a whole document."""
    _check_variant(variant)
    tables = _MixtureTables(config, clamp_floor)
    scores = np.empty(trace.num_tokens)
    details: list[TokenScore] | None = [] if per_token else None
    n_clamped = n_zero = n_unconv = 0
    for t in range(trace.num_tokens):
        ts = _token_score(tables, trace.distributions[t], int(trace.observed_tokens[t]), variant)
        scores[t] = ts.score_bits
        n_clamped += ts.clamped
        n_zero += ts.zero_column
        n_unconv += not ts.solution.converged
        if details is not None:
            details.append(ts)
    return ScoreRecord(
        doc_id=trace.doc_id,
        method=METHOD_RSA_AVG if variant == "avg" else METHOD_RSA_MAX,
        score_bits=float(scores.mean()),
        per_token=details,
        n_clamped=n_clamped,
        n_zero_observed=n_zero,
        n_unconverged=n_unconv,
    )


def binoculars_score(
    trace: EnsembleTrace,
    observer: str,
    performer: str,
    clamp_floor: float = DEFAULT_CLAMP_FLOOR,
) -> ScoreRecord:
    """Ratio of observed codelength to cross-model expected codelength.

    The numerator accumulates the observer model's codelength of each observed
    token; the denominator accumulates the performer-expected codelength under
    the observer. A denominator below 1e-12 (deterministic observer agreeing
    with a deterministic performer) leaves the ratio undefined and raises.
    """
    for model_id in (observer, performer):
        if model_id not in trace.model_ids:
            raise ValidationError(f"model {model_id!r} not present in trace {trace.doc_id!r}")
    obs_idx = trace.model_ids.index(observer)
    perf_idx = trace.model_ids.index(performer)

    obs_rows = trace.distributions[:, obs_idx, :]
    perf_rows = trace.distributions[:, perf_idx, :]
    codelengths = -np.log2(np.maximum(obs_rows, clamp_floor))
    t_range = np.arange(trace.num_tokens)
    observed_probs = obs_rows[t_range, trace.observed_tokens]
    numerator = float(codelengths[t_range, trace.observed_tokens].sum())
    denominator = float((perf_rows * codelengths).sum())
    if denominator < 1e-12:
        raise UndefinedScoreError(
            f"cross-codelength denominator {denominator!r} below 1e-12 for {trace.doc_id!r}"
        )
    return ScoreRecord(
        doc_id=trace.doc_id,
        method=binoculars_method(observer, performer),
        score_bits=numerator / denominator,
        n_clamped=int((observed_probs < clamp_floor).sum()),
    )


def ppl_scores(
    trace: EnsembleTrace,
    config: SolverConfig = DEFAULT_CONFIG,
    clamp_floor: float = DEFAULT_CLAMP_FLOOR,
) -> list[ScoreRecord]:
    """Per-model log-perplexities plus their mean and the mixture-code variant.

    Returns one record per model (mean codelength of the observed tokens under
    that model alone), one record averaging those values across models, and
    one record using the per-position capacity-achieving mixture instead of a
    single model.
    """
    t_range = np.arange(trace.num_tokens)
    observed_probs = trace.distributions[t_range, :, trace.observed_tokens]  # (T, M)
    clamped = observed_probs < clamp_floor
    codelengths = -np.log2(np.maximum(observed_probs, clamp_floor))
    singles = codelengths.mean(axis=0)

    records = [
        ScoreRecord(
            doc_id=trace.doc_id,
            method=ppl_single_method(model_id),
            score_bits=float(singles[m]),
            n_clamped=int(clamped[:, m].sum()),
        )
        for m, model_id in enumerate(trace.model_ids)
    ]
    records.append(
        ScoreRecord(
            doc_id=trace.doc_id,
            method=METHOD_PPL_AVERAGE,
            score_bits=float(singles.mean()),
            n_clamped=int(clamped.sum()),
        )
    )

    tables = _MixtureTables(config, clamp_floor)
    total = 0.0
    n_clamped = n_zero = n_unconv = 0
    for t in range(trace.num_tokens):
        rows = trace.distributions[t]
        observed = int(trace.observed_tokens[t])
        sol, mix_codelengths, _, _ = tables.lookup(rows)
        total += float(mix_codelengths[observed])
        hit = sol.mixture[observed] < clamp_floor
        n_clamped += hit
        n_zero += hit and not rows[:, observed].any()
        n_unconv += not sol.converged
    records.append(
        ScoreRecord(
            doc_id=trace.doc_id,
            method=METHOD_QSTAR_LOGPROB,
            score_bits=total / trace.num_tokens,
            n_clamped=n_clamped,
            n_zero_observed=n_zero,
            n_unconverged=n_unconv,
        )
    )
    return records


def distort(logits, params: DistortionParams) -> np.ndarray:
    """Temperature-scale, softmax, and nucleus-filter a logit vector.

    Keeps the smallest descending-probability prefix whose cumulative mass
    reaches ``top_p`` (ties broken toward lower token index; the comparison
    allows 1e-12 slack so exact-boundary prefixes are kept deterministically),
    rescales the kept mass to 1 - smoothing_eps * n_filtered, and assigns
    ``smoothing_eps`` to every filtered token so the result stays strictly
    positive when the smoothing is.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValidationError(f"logits must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("logits contain non-finite entries")

    scaled = arr / params.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()

    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, params.top_p - 1e-12, side="left"))
    kept = order[: min(cut + 1, arr.size)]
    n_filtered = arr.size - kept.size
    if n_filtered == 0:
        return probs / probs.sum()

    eps = params.smoothing_eps
    if eps * n_filtered >= 1.0:
        raise ValidationError(
            f"smoothing_eps {eps!r} leaves no mass for {kept.size} kept tokens"
        )
    out = np.full(arr.size, eps)
    out[kept] = (probs[kept] / probs[kept].sum()) * (1.0 - eps * n_filtered)
    return out


def unigram_train(token_stream, vocab_size: int, eps: float = 1e-10) -> UnigramModel:
    """Estimate a position-independent token distribution from count ratios.

    Each probability is (count + eps) / (total + N * eps). With eps = 0 every
    token must occur at least once, otherwise the model would assign zero mass.
    """
    if vocab_size < 1:
        raise ValidationError(f"vocab_size must be positive, got {vocab_size!r}")
    if eps < 0:
        raise ValidationError(f"eps must be >= 0, got {eps!r}")
    tokens = np.asarray(token_stream, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValidationError(f"token stream must be 1-D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValidationError("token stream contains out-of-vocabulary indices")
    counts = np.bincount(tokens, minlength=vocab_size).astype(np.float64)
    if eps == 0 and (tokens.size == 0 or counts.min() == 0):
        raise ValidationError("eps=0 requires every vocabulary token to be observed")
    probs = (counts + eps) / (tokens.size + vocab_size * eps)
    return UnigramModel(token_probs=probs, training_token_count=int(tokens.size), eps=eps)


def extend_trace_with_unigram(
    trace: EnsembleTrace, model: UnigramModel, model_id: str = "unigram"
) -> EnsembleTrace:
    """Append the constant unigram row to every position's channel."""
    if model.vocab_size != trace.vocab_size:
        raise ValidationError(
            f"unigram vocabulary {model.vocab_size} does not match trace {trace.vocab_size}"
        )
    if model_id in trace.model_ids:
        raise ValidationError(f"model id {model_id!r} already present in trace")
    t = trace.num_tokens
    extra = np.broadcast_to(model.token_probs, (t, 1, model.vocab_size))
    return EnsembleTrace(
        doc_id=trace.doc_id,
        model_ids=trace.model_ids + (model_id,),
        observed_tokens=trace.observed_tokens,
        distributions=np.concatenate([trace.distributions, extra], axis=1),
        provenance=trace.provenance,
    )
