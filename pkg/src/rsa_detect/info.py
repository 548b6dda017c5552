"""Information measures over discrete distributions.

All quantities are in bits (base-2 logarithms) and follow the convention
0 * log 0 = 0. Inputs are plain probability vectors or a TokenChannel, the
M x N row-stochastic matrix of per-model next-token distributions at one text
position: row m is model m's distribution over the shared vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import ValidationError, as_channel_matrix, as_distribution

__all__ = [
    "TokenChannel",
    "codelength",
    "entropy",
    "kl_divergence",
    "cross_entropy",
    "conditional_mutual_information",
]


def _xlog2x(a: np.ndarray) -> np.ndarray:
    """Elementwise a * log2(a) with 0 * log 0 = 0."""
    out = np.zeros_like(a)
    np.log2(a, out=out, where=a > 0)
    out *= a
    return out


@dataclass(frozen=True)
class TokenChannel:
    """Per-model next-token distributions at one position.

    ``rows`` is M x N with one distribution per model, ``model_ids`` the M
    labels in row order. All rows share the same vocabulary of size N.
    """

    rows: np.ndarray
    model_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        rows = as_channel_matrix(self.rows)
        object.__setattr__(self, "rows", rows)
        ids = tuple(self.model_ids) or tuple(f"m{i}" for i in range(rows.shape[0]))
        if len(ids) != rows.shape[0]:
            raise ValidationError(
                f"got {len(ids)} model ids for {rows.shape[0]} channel rows"
            )
        object.__setattr__(self, "model_ids", ids)

    @property
    def num_models(self) -> int:
        return self.rows.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[1]


def _channel_rows(channel) -> np.ndarray:
    if isinstance(channel, TokenChannel):
        return channel.rows
    return as_channel_matrix(channel)


def codelength(p: float) -> float:
    """Ideal code length -log2(p) in bits of an event with probability p.

    Requires 0 < p <= 1 (a tolerance of 1e-9 above 1 is accepted and clamped,
    so that renormalized float input does not trip the domain check). A
    zero-probability event has infinite codelength and is rejected; the caller
    decides the clamping policy.
    """
    p = float(p)
    if p <= 0.0:
        raise ValidationError(f"codelength undefined for probability {p!r}")
    if p > 1.0 + 1e-9:
        raise ValidationError(f"probability {p!r} exceeds 1")
    return float(-np.log2(min(p, 1.0)))


def entropy(dist) -> float:
    """Shannon entropy of a distribution in bits."""
    d = as_distribution(dist)
    return float(-_xlog2x(d).sum())


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence sum p log2(p/q) in bits.

    Requires equal support size and q > 0 wherever p > 0 (absolute
    continuity); violations raise, they are not clamped.
    """
    p = as_distribution(p, name="p")
    q = as_distribution(q, name="q")
    if p.size != q.size:
        raise ValidationError(f"support sizes differ: {p.size} vs {q.size}")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise ValidationError("q assigns zero mass where p is positive")
    pm = p[mask]
    return float(np.dot(pm, np.log2(pm / q[mask])))


def cross_entropy(p, q) -> float:
    """Expected codelength -sum p log2 q of coding p-distributed data with q."""
    p = as_distribution(p, name="p")
    q = as_distribution(q, name="q")
    if p.size != q.size:
        raise ValidationError(f"support sizes differ: {p.size} vs {q.size}")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise ValidationError("q assigns zero mass where p is positive")
    return float(-np.dot(p[mask], np.log2(q[mask])))


def conditional_mutual_information(weights, channel) -> float:
    """Mutual information in bits between model index and next token.

    With model-index distribution ``weights`` (mu) and channel rows p(y|m),
    returns H(q_mix) - sum_m mu(m) H(row_m) where q_mix = sum_m mu(m) row_m.
    Equals the mu-weighted average of KL(row_m || q_mix).
    """
    rows = _channel_rows(channel)
    mu = as_distribution(weights, name="weights")
    if mu.size != rows.shape[0]:
        raise ValidationError(
            f"got {mu.size} weights for {rows.shape[0]} channel rows"
        )
    mix = mu @ rows
    h_mix = -_xlog2x(mix).sum()
    h_rows = -_xlog2x(rows).sum(axis=1)
    return float(h_mix - np.dot(mu, h_rows))
