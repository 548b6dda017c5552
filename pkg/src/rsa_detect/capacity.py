"""Capacity-achieving model weights for a token channel.

Given the M x N matrix W of per-model next-token distributions at one position,
this module computes the input distribution mu* over models maximizing the
mutual information between model index and token, the induced mixture
q* = sum_m mu*(m) W_m, and the capacity Gamma (bits). By redundancy-capacity
duality, q* is also the code minimizing the worst-case expected excess
codelength over the model family, which is what the scoring layer consumes.

The solver alternates the two classical updates

    q_ji = mu_i W_ij / sum_k mu_k W_kj         (backward channel)
    mu_k <- prod_j (q_jk)^(W_kj) / Z           (weight reestimation)

with the capacity estimate sum_ij mu_i W_ij log2(q_ji / mu_i), which for the
backward channel above equals sum_k mu_k KL(W_k || q_mix). The reestimation
step is carried out in log space (sum_j W_kj log2 q_jk with a max shift), an
exact reformulation that avoids underflow of the products at vocabulary sizes
in the tens of thousands. The estimate ascends monotonically, so iteration
stops once its increment falls below the configured tolerance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .info import TokenChannel, _channel_rows, _xlog2x
from .validation import ValidationError, as_distribution

__all__ = ["SolverConfig", "MixtureSolution", "solve", "minimax_regret_oracle"]

# Weights below this are presentation noise: clamped to 0 and renormalized in
# the returned solution (the capacity estimate is unaffected at ~1e-11 bits).
_WEIGHT_DISPLAY_FLOOR = 1e-12

# Below this tolerance the capacity increment cannot be resolved in float64
# (increments become exactly 0 while the mixture still drifts), so convergence
# additionally requires the mixture iterate to be bit-stable. Weights are not
# required to stall: a vanishing weight keeps decaying geometrically long
# after it stops moving the mixture.
_CAPACITY_RESOLUTION = 1e-15


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rule and initialization for the alternating solver.

    ``tolerance`` is the capacity-increment threshold in bits; iteration also
    stops after ``max_iterations`` weight updates, flagging the solution as
    not converged. ``initial_weights`` defaults to uniform over models, which
    keeps every row reachable.
    """

    tolerance: float = 1e-9
    max_iterations: int = 1000
    initial_weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be positive, got {self.tolerance!r}")
        if self.max_iterations < 1:
            raise ValidationError(
                f"max_iterations must be at least 1, got {self.max_iterations!r}"
            )
        if self.initial_weights is not None:
            object.__setattr__(
                self,
                "initial_weights",
                as_distribution(self.initial_weights, name="initial_weights"),
            )


DEFAULT_CONFIG = SolverConfig()


@dataclass(frozen=True)
class MixtureSolution:
    """Capacity-achieving weights and mixture for one token channel.

    ``mixture`` always satisfies mixture = weights @ rows for the channel the
    solution was computed from; ``capacity_bits`` is the final ascent estimate,
    clamped to be non-negative against float roundoff.
    """

    weights: np.ndarray
    mixture: np.ndarray
    capacity_bits: float
    iterations: int
    converged: bool


def _kl_rows_to_mixture(w: np.ndarray, row_neg_entropy: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """KL(W_k || mu @ W) in bits for each row k; requires all mu > 0."""
    mix = mu @ w
    log_mix = np.zeros_like(mix)
    # Wherever some W_kj > 0, mix_j >= mu_k W_kj > 0, so masked entries only
    # ever multiply W_kj = 0 below.
    np.log2(mix, out=log_mix, where=mix > 0)
    return row_neg_entropy - w @ log_mix


def solve(channel, config: SolverConfig = DEFAULT_CONFIG) -> MixtureSolution:
    """Compute capacity and the capacity-achieving weights of a channel.

    Accepts a TokenChannel or a bare row-stochastic matrix. Vocabulary columns
    with zero mass under every model contribute nothing and are skipped. A
    single-model channel short-circuits to weight [1] and capacity 0. Hitting
    ``max_iterations`` yields ``converged=False`` rather than an error.
    Tolerances below the float64 resolution of the capacity estimate
    additionally run the mixture to a bit-stable fixed point.
    """
    rows = _channel_rows(channel)
    m, n = rows.shape

    if m == 1:
        return MixtureSolution(
            weights=np.ones(1),
            mixture=rows[0].copy(),
            capacity_bits=0.0,
            iterations=0,
            converged=True,
        )

    if config.initial_weights is None:
        mu = np.full(m, 1.0 / m)
    else:
        mu = config.initial_weights.copy()
        if mu.size != m:
            raise ValidationError(f"initial_weights has size {mu.size}, channel has {m} rows")

    active_cols = rows.sum(axis=0) > 0
    w = rows[:, active_cols] if not active_cols.all() else rows
    row_neg_entropy = _xlog2x(w).sum(axis=1)

    capacity = 0.0
    cap_prev = -math.inf
    iterations = 0
    converged = False
    na = w.shape[1]
    # Rotating mixture buffers: the two most recent iterates back the
    # fixed-point/2-cycle stall check without per-iteration allocation.
    mixes = [np.empty(na), np.empty(na), np.empty(na)]
    log_mix = np.empty(na)
    kl = np.empty(m)
    log_mu = np.empty(m)
    mix_prev = None
    mix_before = None
    # Rows whose weight reaches exact 0 are handled in log space: their
    # log2(mu) is -inf, so they stay at 0 through exp2, contribute 0 to the
    # capacity, and their (finite, meaningless) kl entries never propagate.
    with np.errstate(divide="ignore"):
        for _ in range(config.max_iterations):
            mix = mixes[iterations % 3]
            np.matmul(mu, w, out=mix)
            log_mix.fill(0.0)
            # Wherever some supported W_kj > 0, mix_j > 0; masked entries only
            # ever multiply W_kj = 0 below.
            np.log2(mix, out=log_mix, where=mix > 0)
            np.matmul(w, log_mix, out=kl)
            np.subtract(row_neg_entropy, kl, out=kl)
            capacity = float(np.dot(mu, kl))
            # Exact repetition (fixed point or 2-cycle) means later mixtures
            # can only replay earlier ones; as converged as float64 gets.
            mixture_stalled = (mix_prev is not None and np.array_equal(mix, mix_prev)) or (
                mix_before is not None and np.array_equal(mix, mix_before)
            )
            if capacity - cap_prev < config.tolerance and (
                config.tolerance >= _CAPACITY_RESOLUTION or mixture_stalled
            ):
                converged = True
                break
            cap_prev = capacity
            mix_before = mix_prev
            mix_prev = mix

            np.log2(mu, out=log_mu)
            log_mu += kl
            log_mu -= log_mu.max()
            mu = np.exp2(log_mu)
            mu /= mu.sum()
            iterations += 1
        else:
            # Budget exhausted: report the estimate for the final weights.
            support = mu > 0
            kl_final = _kl_rows_to_mixture(
                w[support], row_neg_entropy[support], mu[support]
            )
            capacity = float(np.dot(mu[support], kl_final))

    weights = np.where(mu < _WEIGHT_DISPLAY_FLOOR, 0.0, mu)
    weights /= weights.sum()
    return MixtureSolution(
        weights=weights,
        mixture=weights @ rows,
        capacity_bits=max(capacity, 0.0),
        iterations=iterations,
        converged=converged,
    )


def _mutual_information_batch(candidates: np.ndarray, rows: np.ndarray, row_entropy: np.ndarray) -> np.ndarray:
    """Mutual information in bits for a (P, M) batch of weight vectors."""
    out = np.empty(candidates.shape[0])
    chunk = 1 << 18
    for lo in range(0, candidates.shape[0], chunk):
        part = candidates[lo : lo + chunk]
        mix = part @ rows
        out[lo : lo + part.shape[0]] = -_xlog2x(mix).sum(axis=1) - part @ row_entropy
    return out


def _simplex_grid(m: int, ticks: int) -> np.ndarray:
    """All weight vectors with coordinates in multiples of 1/ticks."""
    if m == 1:
        return np.ones((1, 1))
    count = math.comb(ticks + m - 1, m - 1)
    grid = np.empty((count, m))
    for i, cuts in enumerate(itertools.combinations(range(ticks + m - 1), m - 1)):
        bounds = (-1, *cuts, ticks + m - 1)
        for j in range(m):
            grid[i, j] = bounds[j + 1] - bounds[j] - 1
    grid /= ticks
    return grid


def _local_lattice(center: np.ndarray, step: float, span: float) -> np.ndarray:
    """Simplex points near ``center`` on a lattice of spacing ``step``.

    The first M-1 coordinates range over center +- span in multiples of step;
    the last coordinate absorbs the remainder. Invalid points are dropped.
    """
    m = center.size
    ticks = int(round(span / step))
    offsets = np.arange(-ticks, ticks + 1) * step
    grids = np.meshgrid(*([offsets] * (m - 1)), indexing="ij")
    free = np.stack([g.ravel() for g in grids], axis=1) + center[: m - 1]
    last = 1.0 - free.sum(axis=1)
    cand = np.concatenate([free, last[:, None]], axis=1)
    valid = np.all(cand >= -1e-12, axis=1)
    cand = np.clip(cand[valid], 0.0, None)
    return cand / cand.sum(axis=1, keepdims=True)


def minimax_regret_oracle(channel, grid_step: float, refine_to: float | None = None) -> tuple[float, np.ndarray]:
    """Capacity by exhaustive search over the weight simplex.

    Evaluates the mutual information on a full simplex grid of the given step
    and optionally refines locally around the incumbent, dividing the step by
    10 until it reaches ``refine_to``. Exponential in the number of models, so
    restricted to M <= 5; intended purely as an independent check of ``solve``.
    """
    rows = _channel_rows(channel)
    m = rows.shape[0]
    if m > 5:
        raise ValidationError(f"oracle limited to 5 models, got {m}")
    if not 0 < grid_step <= 1:
        raise ValidationError(f"grid_step must be in (0, 1], got {grid_step!r}")

    row_entropy = -_xlog2x(rows).sum(axis=1)
    grid = _simplex_grid(m, int(round(1.0 / grid_step)))
    values = _mutual_information_batch(grid, rows, row_entropy)
    best = int(values.argmax())
    best_value, best_mu = float(values[best]), grid[best]

    step = grid_step
    while refine_to is not None and step > refine_to * (1 + 1e-9) and m > 1:
        new_step = step / 10.0
        cand = _local_lattice(best_mu, new_step, step)
        values = _mutual_information_batch(cand, rows, row_entropy)
        best = int(values.argmax())
        if values[best] > best_value:
            best_value, best_mu = float(values[best]), cand[best]
        step = new_step

    return best_value, best_mu
