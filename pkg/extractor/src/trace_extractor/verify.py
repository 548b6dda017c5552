"""Recompute sampled trace positions with the live model and compare.

The stored probability of the observed token must match a fresh forward pass
within a relative tolerance; a systematic failure here is the signature of an
off-by-one between stored distributions and the tokens they condition on.
Only meaningful for models whose logits were written undistorted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from .extraction import ExtractionError, _bos_id, model_label
from .rsat import read_trace, stored_observed_prob


@dataclass
class PositionCheck:
    position: int
    stored: float
    recomputed: float
    relative_error: float
    ok: bool


@dataclass
class VerifyReport:
    trace_path: Path
    model_id: str
    checks: list[PositionCheck]

    @property
    def ok(self) -> bool:
        return all(check.ok for check in self.checks)

    @property
    def mismatched_positions(self) -> list[int]:
        return [check.position for check in self.checks if not check.ok]


def verify_trace(
    trace_path,
    model_ref: str,
    sample_positions: int = 10,
    rel_tol: float = 1e-3,
    seed: int = 0,
    model=None,
    tokenizer=None,
) -> VerifyReport:
    """Check stored observed-token probabilities against the live model.

    Samples ``sample_positions`` positions without replacement (all of them
    for short documents), reruns the model on the trace's own token sequence,
    and compares each stored value within ``rel_tol`` relative error.
    Preloaded ``model``/``tokenizer`` objects skip the from_pretrained calls.
    """
    trace = read_trace(trace_path)
    label = model_label(model_ref)
    if label not in trace.model_ids:
        raise ExtractionError(
            f"model {label!r} not among trace models {trace.model_ids}"
        )
    model_index = trace.model_ids.index(label)

    if tokenizer is None:
        tokenizer = AutoTokenizer.from_pretrained(model_ref)
    if model is None:
        model = AutoModelForCausalLM.from_pretrained(model_ref).eval()

    ids = [_bos_id(tokenizer)] + trace.observed.tolist()
    with torch.no_grad():
        logits = model(input_ids=torch.tensor([ids], dtype=torch.long)).logits[0]
    probs = torch.softmax(logits[: len(ids) - 1].double(), dim=-1).numpy()

    t = trace.observed.size
    rng = np.random.default_rng(seed)
    count = min(sample_positions, t)
    positions = sorted(rng.choice(t, size=count, replace=False).tolist())

    checks = []
    for position in positions:
        stored = stored_observed_prob(trace, model_index, position)
        recomputed = float(probs[position, int(trace.observed[position])])
        scale = max(abs(recomputed), 1e-30)
        rel = abs(stored - recomputed) / scale
        checks.append(
            PositionCheck(
                position=position,
                stored=stored,
                recomputed=recomputed,
                relative_error=rel,
                ok=rel <= rel_tol,
            )
        )
    return VerifyReport(trace_path=Path(trace_path), model_id=label, checks=checks)
