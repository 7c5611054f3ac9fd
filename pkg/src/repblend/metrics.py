"""Evaluation metrics: per-category AP / mAP and overall / per-class F1.

Average precision is the non-interpolated rank-accumulation variant;
score ties are broken by original index so results are reproducible.
All values are computed in [0, 1]; report writers emit percentages.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import counters


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """AP of one category: mean of precision@rank over the positive ranks.

    ``targets`` is binary (1 = positive).  Scores are sorted descending
    with ties broken by original index ascending.  Raises if there is no
    positive; callers that average over categories skip those instead.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets).ravel()
    if scores.shape != targets.shape:
        raise ValueError("scores and targets must have equal length")
    total_pos = int((targets == 1).sum())
    if total_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = (targets[order] == 1).astype(np.float64)
    precision_at = np.cumsum(hits) / np.arange(1, len(scores) + 1)
    return float((precision_at * hits).sum() / total_pos)


def mean_average_precision(
    scores: np.ndarray, targets: np.ndarray
) -> tuple[float, list[float | None]]:
    """mAP over categories with at least one positive.

    Categories without positives are excluded from the mean (their slot in
    the per-category list is None) and bump the ``map.empty_category``
    diagnostic counter.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError("scores and targets must be equal-shape N x C arrays")
    per_category: list[float | None] = []
    kept: list[float] = []
    for j in range(scores.shape[1]):
        if (targets[:, j] == 1).sum() == 0:
            counters.increment("map.empty_category")
            per_category.append(None)
            continue
        ap = average_precision(scores[:, j], targets[:, j])
        per_category.append(ap)
        kept.append(ap)
    if not kept:
        raise ValueError("no category has a positive example")
    return float(np.mean(kept)), per_category


@dataclass(frozen=True)
class F1Summary:
    overall_precision: float
    overall_recall: float
    per_class_precision: float
    per_class_recall: float
    of1: float
    cf1: float


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if (p + r) > 0.0 else 0.0


def f1_measures(
    scores: np.ndarray, targets: np.ndarray, threshold: float = 0.5
) -> F1Summary:
    """Overall and per-class F1 from thresholded scores.

    Predictions are ``scores >= threshold``.  Per-category precision /
    recall terms with an empty denominator contribute 0 to the per-class
    means (with a diagnostic); a zero-denominator F1 is defined as 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError("scores and targets must be equal-shape N x C arrays")
    pred = scores >= threshold
    gt = targets == 1
    correct = (pred & gt).sum(axis=0).astype(np.float64)
    predicted = pred.sum(axis=0).astype(np.float64)
    actual = gt.sum(axis=0).astype(np.float64)

    op = float(correct.sum() / predicted.sum()) if predicted.sum() > 0 else 0.0
    orec = float(correct.sum() / actual.sum()) if actual.sum() > 0 else 0.0

    c = scores.shape[1]
    cp_terms = np.zeros(c)
    cr_terms = np.zeros(c)
    for j in range(c):
        if predicted[j] > 0:
            cp_terms[j] = correct[j] / predicted[j]
        else:
            counters.increment("f1.empty_denominator")
        if actual[j] > 0:
            cr_terms[j] = correct[j] / actual[j]
        else:
            counters.increment("f1.empty_denominator")
    cp = float(cp_terms.mean())
    cr = float(cr_terms.mean())

    return F1Summary(
        overall_precision=op,
        overall_recall=orec,
        per_class_precision=cp,
        per_class_recall=cr,
        of1=_f1(op, orec),
        cf1=_f1(cp, cr),
    )


@dataclass(frozen=True)
class EvalReport:
    """Metrics of one evaluation at one known-label proportion."""

    proportion: float
    mean_ap: float
    of1: float
    cf1: float
    per_category_ap: list = field(default_factory=list)
    loss_trace: str | None = None


@dataclass(frozen=True)
class AggregateReport:
    """Arithmetic means of mAP / OF1 / CF1 over a proportion sweep."""

    proportions: list
    mean_ap: float
    of1: float
    cf1: float


def aggregate_proportions(reports: list[EvalReport]) -> AggregateReport:
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    widths = {len(r.per_category_ap) for r in reports if r.per_category_ap}
    if len(widths) > 1:
        raise ValueError("reports do not share a category space")
    return AggregateReport(
        proportions=[r.proportion for r in reports],
        mean_ap=float(np.mean([r.mean_ap for r in reports])),
        of1=float(np.mean([r.of1 for r in reports])),
        cf1=float(np.mean([r.cf1 for r in reports])),
    )


def _pct(x: float) -> str:
    return f"{100.0 * x:.4f}"


def write_report_csv(
    reports: list[EvalReport], path: str | Path, aggregate: AggregateReport | None = None
) -> None:
    """One row per proportion (p, mAP, OF1, CF1 in percent) plus an averages row."""
    if aggregate is None:
        aggregate = aggregate_proportions(reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["proportion", "mAP", "OF1", "CF1"])
        for r in reports:
            writer.writerow([repr(float(r.proportion)), _pct(r.mean_ap), _pct(r.of1), _pct(r.cf1)])
        writer.writerow(["average", _pct(aggregate.mean_ap), _pct(aggregate.of1), _pct(aggregate.cf1)])


def write_report_json(
    reports: list[EvalReport], path: str | Path, aggregate: AggregateReport | None = None
) -> None:
    """JSON mirror of the CSV report, with raw [0, 1] values and per-category APs."""
    if aggregate is None:
        aggregate = aggregate_proportions(reports)
    doc = {
        "per_proportion": [
            {
                "proportion": r.proportion,
                "mAP": r.mean_ap,
                "OF1": r.of1,
                "CF1": r.cf1,
                "per_category_ap": r.per_category_ap,
                "loss_trace": r.loss_trace,
            }
            for r in reports
        ],
        "average": {
            "proportions": aggregate.proportions,
            "mAP": aggregate.mean_ap,
            "OF1": aggregate.of1,
            "CF1": aggregate.cf1,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
