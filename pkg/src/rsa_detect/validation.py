"""Input validation helpers and the package exception hierarchy.

Every public entry point funnels array-like inputs through these helpers so
that invalid probability data is rejected at the boundary instead of surfacing
as NaNs deep inside a solver. Distributions are validated, never silently
renormalized; renormalization is an explicit operation owned by trace_io.
"""

from __future__ import annotations

import numpy as np

# Mass tolerance for in-memory distributions. File loaders use a looser 1e-4
# at the 32-bit storage boundary and renormalize before objects reach here.
PROB_ATOL = 1e-9


class ValidationError(ValueError):
    """An argument violates a documented precondition or type invariant."""


class TraceFormatError(Exception):
    """A trace, manifest, or channel file is corrupt or unreadable."""


class UndefinedScoreError(ArithmeticError):
    """A score is mathematically undefined for the given input."""


def as_distribution(values, *, name: str = "distribution", atol: float = PROB_ATOL) -> np.ndarray:
    """Validate a probability vector and return it as a float64 array.

    Requires a 1-D array of finite, non-negative entries summing to 1 within
    ``atol``. Out-of-tolerance input is rejected, not renormalized.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise ValidationError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    if np.any(arr < 0):
        raise ValidationError(f"{name} contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > atol:
        raise ValidationError(f"{name} sums to {total!r}, expected 1 within {atol}")
    return arr


def as_channel_matrix(rows, *, name: str = "channel", atol: float = PROB_ATOL) -> np.ndarray:
    """Validate an M x N row-stochastic matrix and return it as float64."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    m, n = arr.shape
    if m < 1 or n < 1:
        raise ValidationError(f"{name} must be at least 1x1, got {m}x{n}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    if np.any(arr < 0):
        raise ValidationError(f"{name} contains negative entries")
    sums = arr.sum(axis=1)
    bad = np.where(np.abs(sums - 1.0) > atol)[0]
    if bad.size:
        raise ValidationError(
            f"{name} rows {bad.tolist()} are not stochastic (sums {sums[bad].tolist()})"
        )
    return arr


def check_token_index(index, vocab_size: int, *, name: str = "token") -> int:
    idx = int(index)
    if not 0 <= idx < vocab_size:
        raise ValidationError(f"{name} index {idx} outside vocabulary of size {vocab_size}")
    return idx
