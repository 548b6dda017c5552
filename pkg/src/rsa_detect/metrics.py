"""Detection-quality metrics and plot-ready report exports.

Every score family emitted by the scoring layer marks machine-generated text
with LOW raw values, so the detector statistic is uniformly the negated score:
a document is declared artificial when its raw score falls below a threshold.
LabeledScores centralizes that orientation once; artificial is the positive
class throughout.

AUROC uses the rank form of the Mann-Whitney statistic with half credit for
ties, which matches trapezoidal ROC integration and is float-exact against a
pairwise count. The TPR-at-FPR sweep considers only observed statistics as
thresholds, classifying positive on a strictly-greater comparison; it picks
the most permissive threshold whose empirical FPR stays within the target,
i.e. the largest raw-score threshold, which maximizes TPR under the
constraint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .validation import ValidationError

__all__ = [
    "LabeledScores",
    "auroc",
    "tpr_at_fpr",
    "calibrate_threshold",
    "roc_points",
    "export_report",
]

POSITIVE_LABEL = "artificial"
NEGATIVE_LABEL = "human"


def _coerce_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in ("U", "S", "O"):
        out = np.empty(arr.size, dtype=bool)
        for i, value in enumerate(arr.ravel()):
            if value == POSITIVE_LABEL:
                out[i] = True
            elif value == NEGATIVE_LABEL:
                out[i] = False
            else:
                raise ValidationError(
                    f"label must be {POSITIVE_LABEL!r} or {NEGATIVE_LABEL!r}, got {value!r}"
                )
        return out
    return arr.astype(bool)


@dataclass(frozen=True)
class LabeledScores:
    """Raw scores in bits paired with human/artificial labels.

    ``statistics`` exposes the negated scores, oriented so that larger values
    mean more likely artificial.
    """

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = _coerce_labels(self.labels)
        if scores.size != labels.size:
            raise ValidationError(
                f"{scores.size} scores but {labels.size} labels"
            )
        if scores.size == 0:
            raise ValidationError("empty score set")
        if not np.all(np.isfinite(scores)):
            raise ValidationError("scores contain non-finite values")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def statistics(self) -> np.ndarray:
        return -self.scores

    def require_both_classes(self):
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == self.labels.size:
            raise ValidationError("need at least one score from each class")


def auroc(labeled: LabeledScores) -> float:
    """Probability a random artificial outranks a random human, ties half."""
    labeled.require_both_classes()
    stats = labeled.statistics
    pos = labeled.labels
    n_pos = int(pos.sum())
    n_neg = stats.size - n_pos
    ranks = rankdata(stats)
    numerator = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(numerator / (n_pos * n_neg))


def _threshold_sweep(labeled: LabeledScores):
    stats = labeled.statistics
    pos_sorted = np.sort(stats[labeled.labels])
    neg_sorted = np.sort(stats[~labeled.labels])
    thresholds = np.unique(stats)
    fpr = (neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="right")) / neg_sorted.size
    tpr = (pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="right")) / pos_sorted.size
    return thresholds, fpr, tpr


def tpr_at_fpr(labeled: LabeledScores, fpr: float) -> float:
    """TPR at the most permissive observed threshold with FPR <= target."""
    if not 0 < fpr < 1:
        raise ValidationError(f"target FPR must be in (0, 1), got {fpr!r}")
    labeled.require_both_classes()
    thresholds, fprs, tprs = _threshold_sweep(labeled)
    feasible = np.where(fprs <= fpr)[0]
    # The largest threshold admits no negatives, so the set is never empty.
    return float(tprs[feasible[0]])


def calibrate_threshold(labeled: LabeledScores, target_fpr: float) -> float:
    """Raw-score threshold (bits) realizing the tpr_at_fpr operating point.

    Texts scoring below the returned value are declared artificial. The
    threshold is placed mid-gap between the boundary score and the next
    observed score below it, so perfect separation yields the midpoint of the
    class extremes.
    """
    if not 0 < target_fpr < 1:
        raise ValidationError(f"target FPR must be in (0, 1), got {target_fpr!r}")
    labeled.require_both_classes()
    thresholds, fprs, _ = _threshold_sweep(labeled)
    feasible = np.where(fprs <= target_fpr)[0]
    boundary = -float(thresholds[feasible[0]])
    below = labeled.scores[labeled.scores < boundary]
    lower = float(below.max()) if below.size else boundary - 1.0
    return (lower + boundary) / 2.0


def roc_points(labeled: LabeledScores) -> np.ndarray:
    """ROC staircase as (fpr, tpr) rows from (0,0) to (1,1)."""
    labeled.require_both_classes()
    thresholds, fprs, tprs = _threshold_sweep(labeled)
    # Thresholds ascend, so FPR/TPR descend; reverse into curve order.
    points = np.column_stack([fprs[::-1], tprs[::-1]])
    return np.vstack([[0.0, 0.0], points, [1.0, 1.0]])


def _float_str(value: float) -> str:
    return repr(float(value))


def _records_by_method(records):
    by_method: dict[str, dict[str, float]] = {}
    for rec in records:
        by_method.setdefault(rec.method, {})[rec.doc_id] = rec.score_bits
    return by_method


def export_report(records, manifest, out_dir, target_fpr: float = 0.05) -> dict[str, Path]:
    """Write summary, ROC-point, and histogram CSVs for scored documents.

    Every record's doc_id must match a manifest entry. The summary groups
    artificial documents by (source_corpus, generator) and evaluates each
    group against the human documents of the same corpus; ROC points and the
    fixed 50-bin histograms pool all documents per method. Ordering is
    deterministic and floats are emitted with full round-trip precision.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    meta = {rec.doc_id: rec for rec in manifest}
    unmatched = sorted({rec.doc_id for rec in records} - set(meta))
    if unmatched:
        raise ValidationError(f"score records without manifest entries: {unmatched}")

    by_method = _records_by_method(records)
    methods = sorted(by_method)

    summary_rows = []
    for method in methods:
        scores = by_method[method]
        humans: dict[str, list[float]] = {}
        groups: dict[tuple[str, str], list[float]] = {}
        for doc_id, score in scores.items():
            rec = meta[doc_id]
            if rec.label == NEGATIVE_LABEL:
                humans.setdefault(rec.source_corpus, []).append(score)
            else:
                groups.setdefault((rec.source_corpus, rec.generator or ""), []).append(score)
        for (corpus, generator) in sorted(groups):
            art = groups[(corpus, generator)]
            hum = humans.get(corpus)
            if not hum:
                raise ValidationError(
                    f"corpus {corpus!r} has artificial documents but no human ones"
                )
            labeled = LabeledScores(
                np.concatenate([hum, art]),
                np.concatenate([np.zeros(len(hum), bool), np.ones(len(art), bool)]),
            )
            summary_rows.append(
                (method, corpus, generator, auroc(labeled),
                 tpr_at_fpr(labeled, target_fpr), len(hum), len(art))
            )

    # evaluation-time selection of the best-discriminating single-model
    # perplexity per group: a selection over computed rows, not a scorer
    singles = [row for row in summary_rows if row[0].startswith("ppl_single(")]
    oracle_groups: dict[tuple[str, str], tuple] = {}
    for row in singles:
        key = (row[1], row[2])
        if key not in oracle_groups or row[3] > oracle_groups[key][3]:
            oracle_groups[key] = row
    for (corpus, generator), row in oracle_groups.items():
        summary_rows.append(("ppl_oracle", corpus, generator, *row[3:]))
    summary_rows.sort(key=lambda row: (row[0], row[1], row[2]))

    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "corpus", "generator", "auroc", "tpr_at_5fpr", "n_human", "n_artificial"]
        )
        for method, corpus, generator, auc, tpr, n_hum, n_art in summary_rows:
            writer.writerow(
                [method, corpus, generator, _float_str(auc), _float_str(tpr), n_hum, n_art]
            )

    roc_path = out_dir / "roc_points.csv"
    with open(roc_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "fpr", "tpr"])
        for method in methods:
            labeled = _pooled(by_method[method], meta)
            if labeled is None:
                continue
            for fpr, tpr in roc_points(labeled):
                writer.writerow([method, _float_str(fpr), _float_str(tpr)])

    hist_path = out_dir / "histograms.csv"
    with open(hist_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "label", "bin_lo", "bin_hi", "count"])
        for method in methods:
            scores = by_method[method]
            values = np.array([scores[d] for d in sorted(scores)])
            lo, hi = float(values.min()), float(values.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            edges = np.linspace(lo, hi, 51)
            for label in (NEGATIVE_LABEL, POSITIVE_LABEL):
                subset = np.array(
                    [scores[d] for d in sorted(scores) if meta[d].label == label]
                )
                counts, _ = np.histogram(subset, bins=edges) if subset.size else (
                    np.zeros(50, dtype=int),
                    edges,
                )
                for b in range(50):
                    writer.writerow(
                        [method, label, _float_str(edges[b]), _float_str(edges[b + 1]), int(counts[b])]
                    )

    return {"summary": summary_path, "roc_points": roc_path, "histograms": hist_path}


def _pooled(scores: dict[str, float], meta) -> LabeledScores | None:
    doc_ids = sorted(scores)
    values = np.array([scores[d] for d in doc_ids])
    labels = np.array([meta[d].label == POSITIVE_LABEL for d in doc_ids])
    if labels.all() or not labels.any():
        return None
    return LabeledScores(values, labels)
