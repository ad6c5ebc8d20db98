"""Threshold-free detection metrics.

Conventions, fixed across the package:

* Scores are "higher means in-distribution". A threshold t predicts
  in-distribution when score >= t.
* Ties are handled by grouping: curves use the distinct score values as
  thresholds, and AUROC counts tied in/out pairs as half.
* Precision-recall areas use step interpolation (the average-precision
  sum), never the trapezoid, which is known to flatter PR curves.
* ``detection_accuracy`` is the best balanced accuracy over thresholds,
  i.e. max over t of (TPR(t) + TNR(t)) / 2.

Accumulations use ``math.fsum`` so results do not depend on summation
order; with counts this small every metric is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import as_vector

__all__ = [
    "roc_curve",
    "auroc",
    "tnr_at_tpr",
    "aupr_in",
    "aupr_out",
    "detection_accuracy",
    "EvalReport",
    "evaluate_detection",
    "report_lines",
    "parse_report",
]

# Guard for count >= target * n comparisons: keeps exact-boundary targets
# (0.95 * 20 and friends) from tipping on float rounding.
_COUNT_EPS = 1e-9


def _scores(in_scores, out_scores) -> tuple[np.ndarray, np.ndarray]:
    s_in = as_vector(np.asarray(in_scores, dtype=np.float64), "in_scores")
    s_out = as_vector(np.asarray(out_scores, dtype=np.float64), "out_scores")
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("in_scores and out_scores must both be non-empty")
    return s_in, s_out


def roc_curve(in_scores, out_scores):
    """ROC points swept over the distinct scores, ties grouped.

    Returns:
        (fpr, tpr, thresholds): arrays of equal length; the first point is
        (0, 0) at threshold +inf and the last is (1, 1) at the minimum
        score. Both rates are non-decreasing.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    thresholds = np.unique(np.concatenate([s_in, s_out]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    ts = [np.inf]
    for t in thresholds:
        tpr.append(float(np.count_nonzero(s_in >= t)) / s_in.size)
        fpr.append(float(np.count_nonzero(s_out >= t)) / s_out.size)
        ts.append(float(t))
    return np.asarray(fpr), np.asarray(tpr), np.asarray(ts)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def auroc(in_scores, out_scores) -> float:
    """Area under the ROC curve; tied pairs count half.

    Computed as the rank-sum statistic U / (n_in * n_out), which equals
    the trapezoidal area of ``roc_curve`` and stays exact under ties.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    ranks = _average_ranks(np.concatenate([s_in, s_out]))
    n_in, n_out = s_in.size, s_out.size
    u = math.fsum(ranks[:n_in]) - 0.5 * n_in * (n_in + 1)
    return u / (n_in * n_out)


def tnr_at_tpr(in_scores, out_scores, tpr_target: float = 0.95) -> float:
    """True-negative rate at the loosest threshold keeping TPR >= target.

    The threshold is the largest t with (fraction of in_scores >= t) >=
    ``tpr_target``; the return value is the fraction of out_scores
    strictly below that t.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    if not 0.0 <= tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in [0, 1], got {tpr_target}")
    if tpr_target <= 0.0:
        return 1.0  # any threshold above every score satisfies TPR >= 0
    need = tpr_target * s_in.size - _COUNT_EPS
    threshold = None
    for t in np.unique(s_in)[::-1]:
        if np.count_nonzero(s_in >= t) >= need:
            threshold = t
            break
    return float(np.count_nonzero(s_out < threshold)) / s_out.size


def _average_precision(pos: np.ndarray, neg: np.ndarray) -> float:
    """Step-interpolated area under precision-recall, positives scoring high."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    terms = []
    r_prev = 0.0
    for t in thresholds:
        tp = int(np.count_nonzero(pos >= t))
        fp = int(np.count_nonzero(neg >= t))
        precision = tp / (tp + fp)
        recall = tp / pos.size
        terms.append((recall - r_prev) * precision)
        r_prev = recall
    return math.fsum(terms)


def aupr_in(in_scores, out_scores) -> float:
    """Area under precision-recall with in-distribution as the positive class."""
    s_in, s_out = _scores(in_scores, out_scores)
    return _average_precision(s_in, s_out)


def aupr_out(in_scores, out_scores) -> float:
    """Area under precision-recall with the outliers as the positive class.

    Scores are negated so that the positive class is the high-scoring one,
    then the same step-interpolated sum applies.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    return _average_precision(-s_out, -s_in)


def detection_accuracy(in_scores, out_scores) -> float:
    """Best balanced accuracy over all thresholds.

    max over t of 0.5 * (TPR(t) + TNR(t)); the sweep covers every distinct
    score plus the reject-everything threshold, which scores 0.5.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    best = 0.5  # threshold above every score: TPR 0, TNR 1
    for t in np.unique(np.concatenate([s_in, s_out])):
        tpr = float(np.count_nonzero(s_in >= t)) / s_in.size
        tnr = float(np.count_nonzero(s_out < t)) / s_out.size
        acc = 0.5 * (tpr + tnr)
        if acc > best:
            best = acc
    return best


@dataclass(frozen=True)
class EvalReport:
    """Summary of one in/out evaluation, in the conventional column order."""

    n_in: int
    n_out: int
    tnr_at_tpr95: float
    auroc: float
    detection_accuracy: float
    aupr_in: float
    aupr_out: float

    def row(self) -> str:
        """Single table row: TNR@TPR95, AUROC, detection acc, AUPR-in/out."""
        return (
            f"{self.tnr_at_tpr95:.4f} {self.auroc:.4f} "
            f"{self.detection_accuracy:.4f} {self.aupr_in:.4f} {self.aupr_out:.4f}"
        )


def evaluate_detection(in_scores, out_scores, tpr_target: float = 0.95) -> EvalReport:
    """Compute the full metric set for one score pair."""
    s_in, s_out = _scores(in_scores, out_scores)
    return EvalReport(
        n_in=int(s_in.size),
        n_out=int(s_out.size),
        tnr_at_tpr95=tnr_at_tpr(s_in, s_out, tpr_target),
        auroc=auroc(s_in, s_out),
        detection_accuracy=detection_accuracy(s_in, s_out),
        aupr_in=aupr_in(s_in, s_out),
        aupr_out=aupr_out(s_in, s_out),
    )


def report_lines(report: EvalReport) -> list[str]:
    """key=value lines; floats use repr so parsing round-trips exactly."""
    return [
        f"n_in={report.n_in}",
        f"n_out={report.n_out}",
        f"tnr_at_tpr95={report.tnr_at_tpr95!r}",
        f"auroc={report.auroc!r}",
        f"detection_accuracy={report.detection_accuracy!r}",
        f"aupr_in={report.aupr_in!r}",
        f"aupr_out={report.aupr_out!r}",
    ]


def parse_report(text: str) -> EvalReport:
    """Inverse of ``report_lines``."""
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    return EvalReport(
        n_in=int(fields["n_in"]),
        n_out=int(fields["n_out"]),
        tnr_at_tpr95=float(fields["tnr_at_tpr95"]),
        auroc=float(fields["auroc"]),
        detection_accuracy=float(fields["detection_accuracy"]),
        aupr_in=float(fields["aupr_in"]),
        aupr_out=float(fields["aupr_out"]),
    )
