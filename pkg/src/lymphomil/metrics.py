"""Slide-level evaluation: ROC AUC, accuracy, PPV/NPV, fold aggregation.

The positive class is ABC throughout; scores are the model's ABC
probability. PPV or NPV can be undefined on small test sets (empty
predicted-positive or predicted-negative group); they are carried as
None, never as NaN, and fold aggregation skips them with a warning.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError

logger = logging.getLogger(__name__)

METRIC_CSV_COLUMNS = ("fold", "auc", "acc", "ppv", "npv", "tp", "fp", "tn", "fn")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


@dataclass(frozen=True)
class EvalResult:
    auc: float
    acc: float
    ppv: Optional[float]
    npv: Optional[float]
    confusion: Confusion


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values sharing their average rank.

    Midranks are half-integers, so for n within any realistic slide
    count they are exact in float64; this is what makes the rank AUC
    agree bit-for-bit with brute-force pair counting.
    """
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    n = values.size
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC by the rank method, O(n log n).

    Equals (#concordant + 0.5 * #tied) / (#pos * #neg) exactly,
    ties included. Raises when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise UndefinedMetricError("scores and labels must be equal-length vectors")
    if not np.isfinite(s).all():
        raise UndefinedMetricError("scores must be finite")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positive / {n_neg} negative"
        )
    ranks = _midranks(s)
    pos_rank_sum = float(np.sum(ranks[y == 1]))
    numerator = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return numerator / (n_pos * n_neg)


def confusion_at_threshold(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> Confusion:
    """Predict positive iff score >= threshold; count the four cells."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pred = s >= threshold
    actual = y == 1
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    tn = int(np.sum(~pred & ~actual))
    fn = int(np.sum(~pred & actual))
    return Confusion(tp=tp, fp=fp, tn=tn, fn=fn)


def ppv_npv(confusion: Confusion) -> tuple[Optional[float], Optional[float]]:
    """Predictive values; None when the corresponding denominator is zero."""
    ppv = confusion.tp / (confusion.tp + confusion.fp) if confusion.tp + confusion.fp else None
    npv = confusion.tn / (confusion.tn + confusion.fn) if confusion.tn + confusion.fn else None
    return ppv, npv


def evaluate(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> EvalResult:
    conf = confusion_at_threshold(scores, labels, threshold)
    ppv, npv = ppv_npv(conf)
    return EvalResult(
        auc=roc_auc(scores, labels),
        acc=conf.accuracy,
        ppv=ppv,
        npv=npv,
        confusion=conf,
    )


def aggregate_metric(values: Sequence[Optional[float]], name: str = "") -> dict[str, Optional[float]]:
    """Mean, population std, and max across folds, skipping undefined folds."""
    defined = [v for v in values if v is not None]
    if len(defined) < len(values):
        logger.warning(
            "metric %s undefined in %d of %d folds; excluded from the summary",
            name or "<unnamed>",
            len(values) - len(defined),
            len(values),
        )
    if not defined:
        return {"mean": None, "std": None, "max": None}
    arr = np.asarray(defined, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=0)),
        "max": float(arr.max()),
    }


def write_metric_csv(path: str | Path, rows: Sequence[tuple[int, EvalResult]]) -> None:
    """One CSV row per fold: fold,auc,acc,ppv,npv,tp,fp,tn,fn."""

    def fmt(v: Optional[float]) -> str:
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRIC_CSV_COLUMNS)
        for fold_index, r in rows:
            c = r.confusion
            writer.writerow(
                [fold_index, fmt(r.auc), fmt(r.acc), fmt(r.ppv), fmt(r.npv), c.tp, c.fp, c.tn, c.fn]
            )
