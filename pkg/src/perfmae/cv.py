"""Nested stratified k-fold evaluation of LoRA-adapted encoders."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import PerfMAEError, StratificationError
from .lora import BINARY, REGRESSION, FinetuneHyper, LoRASpec, _predict, run_finetune
from .metrics import CLASSIFICATION_KEYS, REGRESSION_KEYS, classification_metrics, mean_metrics, regression_metrics
from .vit import Encoder

log = logging.getLogger(__name__)


@dataclass
class FoldPlan:
    k: int
    outer: List[np.ndarray]
    inner: List[Tuple[np.ndarray, np.ndarray]]

    def audit(self) -> List[dict]:
        """Per-iteration index audit; raises if any test index leaks into train/val."""
        rows = []
        for f, test in enumerate(self.outer):
            train, val = self.inner[f]
            t = set(test.tolist())
            leak = sorted(t & (set(train.tolist()) | set(val.tolist())))
            rows.append({
                "fold": f,
                "test": test.tolist(),
                "train": train.tolist(),
                "val": val.tolist(),
                "test_disjoint": not leak,
                "train_val_disjoint": not (set(train.tolist()) & set(val.tolist())),
            })
            if leak:
                raise StratificationError(f"fold {f}: test indices {leak[:5]} appear in train/val")
        return rows


def strata_for_regression(targets: Sequence[float], n_bins: int = 5) -> np.ndarray:
    """Equal-count quantile bins (ties broken by index) used as stratification labels."""
    t = np.asarray(targets, dtype=np.float64)
    order = np.argsort(t, kind="stable")
    bins = np.empty(len(t), dtype=int)
    bins[order] = (np.arange(len(t)) * n_bins) // len(t)
    return bins


def _deal(groups: Dict[int, np.ndarray], k: int, start: int = 0) -> List[List[int]]:
    folds = [[] for _ in range(k)]
    pos = start
    for cls in sorted(groups):
        for i in groups[cls]:
            folds[pos % k].append(int(i))
            pos += 1
    return folds


def stratified_kfold(strata: Sequence[int], k: int = 5, seed: int = 0, val_fraction: float = 0.2) -> FoldPlan:
    """Deal shuffled members of each stratum round-robin over k folds.

    The fold pointer carries over between strata, so fold sizes differ by at
    most one overall and per stratum.
    """
    strata = np.asarray(strata).astype(int)
    classes, counts = np.unique(strata, return_counts=True)
    small = [int(c) for c, n in zip(classes, counts) if n < k]
    if small:
        raise StratificationError(f"strata {small} have fewer than k={k} members")
    rng = np.random.default_rng([seed, 0])
    groups = {int(c): rng.permutation(np.flatnonzero(strata == c)) for c in classes}
    outer = [np.sort(np.array(f, dtype=int)) for f in _deal(groups, k)]

    inner = []
    for f in range(k):
        train_all = np.sort(np.concatenate([outer[g] for g in range(k) if g != f]))
        inner.append(stratified_split(train_all, strata, val_fraction, np.random.default_rng([seed, 1, f])))
    return FoldPlan(k=k, outer=outer, inner=inner)


def stratified_split(indices: np.ndarray, strata: Sequence[int], val_fraction: float,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Split ``indices`` into (train, val) holding out ``val_fraction`` of each stratum (at least one)."""
    strata = np.asarray(strata).astype(int)
    indices = np.asarray(indices, dtype=int)
    val = []
    for c in np.unique(strata[indices]):
        members = rng.permutation(indices[strata[indices] == c])
        n_val = int(round(val_fraction * len(members)))
        if len(members) >= 2:
            n_val = min(max(n_val, 1), len(members) - 1)
        val.extend(members[:n_val].tolist())
    val = np.sort(np.array(val, dtype=int))
    return np.setdiff1d(indices, val), val


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def run_nested_cv(
    patches: torch.Tensor,
    targets: Sequence[float],
    task_kind: str,
    encoder: Encoder,
    spec: LoRASpec,
    hyper: FinetuneHyper,
    k: int = 5,
    seed: int = 0,
    task_name: str = "task",
    config: Optional[dict] = None,
) -> dict:
    """Outer k-fold test estimates with an inner stratified split for model selection.

    Returns a JSON-serializable report with per-fold metrics, their mean and
    the per-iteration index audit.
    """
    targets = np.asarray(targets, dtype=np.float64)
    strata = targets.astype(int) if task_kind == BINARY else strata_for_regression(targets)
    plan = stratified_kfold(strata, k, seed)
    audit = plan.audit()
    keys = CLASSIFICATION_KEYS if task_kind == BINARY else REGRESSION_KEYS

    folds = []
    t0 = time.time()
    for f in range(k):
        train, val = plan.inner[f]
        test = plan.outer[f]
        try:
            result = run_finetune(
                encoder, patches[torch.from_numpy(train)], targets[train],
                patches[torch.from_numpy(val)], targets[val],
                task_kind, spec, replace(hyper, seed=hyper.seed + 1000 * f),
            )
            scores = _predict(result.model, patches[torch.from_numpy(test)].to(next(result.model.parameters()).dtype))
            if task_kind == BINARY:
                metrics = classification_metrics(scores, targets[test].astype(int))
            else:
                metrics = regression_metrics(scores, targets[test])
        except PerfMAEError as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
        folds.append({
            "fold": f,
            "n_train": int(len(train)),
            "n_val": int(len(val)),
            "n_test": int(len(test)),
            "best_epoch": result.best_epoch,
            "best_val_metric": result.best_metric,
            "metrics": metrics,
        })
        log.info("fold %d %s (%.1fs)", f, {k_: round(float(metrics[k_]), 4) for k_ in keys}, time.time() - t0)

    config = config or {}
    return {
        "task": task_name,
        "task_kind": task_kind,
        "k": k,
        "folds": folds,
        "mean": mean_metrics([fd["metrics"] for fd in folds], keys),
        "seeds": {"cv": seed, "finetune": hyper.seed},
        "config": config,
        "config_hash": config_hash(config),
        "audit": audit,
    }


_LABELS = {
    "auc": "AUC", "accuracy": "Accuracy", "precision": "Precision", "recall": "Recall", "f1": "F1-score",
    "mse": "MSE", "mae": "MAE", "rmse": "RMSE", "r2": "R2", "pearson": "PC",
}


def render_table(rows: Dict[str, Dict[str, float]], keys: Sequence[str]) -> str:
    """Plain-text table in percent, one row per entry of ``rows``."""
    head = ["Method"] + [_LABELS[k] for k in keys]
    body = [[name] + [f"{100.0 * float(m[k]):.2f}" for k in keys] for name, m in rows.items()]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))
    lines = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n(Unit: %)\n"
