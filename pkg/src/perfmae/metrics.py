"""Classification and regression metrics."""
from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

CLASSIFICATION_KEYS = ("auc", "accuracy", "precision", "recall", "f1")
REGRESSION_KEYS = ("mse", "mae", "rmse", "r2", "pearson")


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(scores, labels, threshold: float = 0.5) -> Dict[str, object]:
    """Threshold-based counts plus AUC.

    Zero denominators give 0 and are listed under ``flags``. AUC is NaN (and
    flagged) when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = (scores >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    flags = []
    precision = tp / (tp + fp) if tp + fp else 0.0
    if tp + fp == 0:
        flags.append("precision_zero_denominator")
    recall = tp / (tp + fn) if tp + fn else 0.0
    if tp + fn == 0:
        flags.append("recall_zero_denominator")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append("f1_zero_denominator")
    try:
        auc_value = auc(scores, labels)
    except UndefinedMetricError:
        auc_value = float("nan")
        flags.append("auc_single_class")
    return {
        "auc": auc_value,
        "accuracy": (tp + tn) / len(labels) if len(labels) else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        "flags": flags,
    }


def r2_score(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    tc = t - t.mean()
    sst = float(np.sum(tc * tc))
    if sst == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return 1.0 - float(np.sum((p - t) ** 2)) / sst


def pearson(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    pc, tc = p - p.mean(), t - t.mean()
    spp, stt = float(np.sum(pc * pc)), float(np.sum(tc * tc))
    if spp == 0 or stt == 0:
        raise UndefinedMetricError("Pearson correlation is undefined for constant inputs")
    return float(np.sum(pc * tc) / math.sqrt(spp * stt))


def regression_metrics(preds, targets) -> Dict[str, float]:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size < 2:
        raise UndefinedMetricError("regression metrics need >= 2 paired values")
    err = p - t
    mse = float(np.mean(err * err))
    return {
        "mse": mse,
        "rmse": math.sqrt(mse),
        "mae": float(np.mean(np.abs(err))),
        "r2": r2_score(p, t),
        "pearson": pearson(p, t),
    }


def mean_metrics(records: List[Dict[str, object]], keys: Sequence[str]) -> Dict[str, float]:
    return {k: float(np.mean([float(r[k]) for r in records])) for k in keys}
