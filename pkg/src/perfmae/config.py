"""Run configuration (JSON) and scan manifests (JSON lines)."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from .decoder import DecoderConfig
from .errors import ConfigError, DataError
from .lora import BINARY, REGRESSION, FinetuneHyper, LoRASpec
from .train import PretrainPlan
from .vit import ViTConfig

DEFAULTS: Dict[str, Any] = {
    "model": {
        "embed_dim": 768,
        "n_blocks": 12,
        "n_heads": 12,
        "mlp_dim": 3072,
        "patch_size": 12,
        "dec_dim": 384,
        "dec_blocks": 4,
        "dec_heads": 12,
        "dec_mlp_dim": 1536,
    },
    "pretrain": {
        "epochs": 400,
        "warmup_epochs": 40,
        "batch_size": 48,
        "base_lr": 1.5e-4,
        "weight_decay": 0.05,
        "rho": 0.5,
        "alpha_bal": 0.5,
        "seed": 0,
        "beta1": 0.9,
        "beta2": 0.95,
        "eps": 1e-8,
        "checkpoint_every": 0,
        "grad_clip": None,
        "deterministic": True,
    },
    "finetune": {
        "epochs": 100,
        "warmup_epochs": 10,
        "batch_size": 8,
        "base_lr": 5e-4,
        "weight_decay": 0.05,
        "lora": {"r": 8, "alpha": 16.0, "dropout": 0.2},
        "seed": 0,
    },
    "data": {
        "manifest_path": None,
        "format": "auto",
        "grid": [96, 96, 96],
        "crop_threshold": 0.0,
    },
    "eval": {"k": 5, "seed": 0},
}

DATA_FORMATS = ("auto", "ivol", "nifti")


def _merge(defaults: dict, given: dict, prefix: str, unknown: List[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            unknown.append(path)
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                unknown.append(path)
            else:
                out[key] = _merge(defaults[key], value, path + ".", unknown)
        else:
            out[key] = value
    return out


def resolve_config(given: Optional[dict] = None) -> dict:
    """Fill defaults and reject unknown keys (all of them are named in the error)."""
    unknown: List[str] = []
    cfg = _merge(DEFAULTS, given or {}, "", unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    problems = []
    try:
        model_configs(cfg)
    except ConfigError as exc:
        problems.append(f"model: {exc}")
    for section, build in (("pretrain", pretrain_plan), ("finetune", finetune_hyper), ("finetune.lora", lora_spec)):
        try:
            build(cfg)
        except (ConfigError, TypeError, ValueError) as exc:
            problems.append(f"{section}: {exc}")
    if cfg["data"]["format"] not in DATA_FORMATS:
        problems.append(f"data.format must be one of {DATA_FORMATS}")
    if int(cfg["eval"]["k"]) < 2:
        problems.append("eval.k must be >= 2")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def load_config(path) -> dict:
    try:
        given = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(given, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve_config(given)


def model_configs(cfg: dict):
    m = cfg["model"]
    grid = tuple(int(g) for g in cfg["data"]["grid"])
    enc = ViTConfig(m["embed_dim"], m["n_blocks"], m["n_heads"], m["mlp_dim"], m["patch_size"], grid)
    dec = DecoderConfig(m["dec_dim"], m["dec_blocks"], m["dec_heads"], m["dec_mlp_dim"])
    return enc, dec


def pretrain_plan(cfg: dict) -> PretrainPlan:
    return PretrainPlan(**cfg["pretrain"])


def finetune_hyper(cfg: dict) -> FinetuneHyper:
    f = {k: v for k, v in cfg["finetune"].items() if k != "lora"}
    return FinetuneHyper(**f)


def lora_spec(cfg: dict) -> LoRASpec:
    return LoRASpec(**cfg["finetune"]["lora"])


def require(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node.get(part) if isinstance(node, dict) else None
    if node is None:
        raise ConfigError(f"missing required config key {dotted}")
    return node


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def read_manifest(path) -> List[dict]:
    """JSON-lines records {path, study_id, label?, score?}; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise DataError(f"{path}:{n}: invalid JSON ({exc})") from exc
        if "path" not in rec:
            raise DataError(f"{path}:{n}: record has no path")
        p = Path(rec["path"])
        rec["path"] = str(p if p.is_absolute() else path.parent / p)
        rec.setdefault("study_id", "default")
        records.append(rec)
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records


def write_manifest(records: List[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def task_targets(records: List[dict]):
    """Return ``(task_kind, targets)``; every record carries exactly one of label/score."""
    has_label = ["label" in r for r in records]
    has_score = ["score" in r for r in records]
    for r, hl, hs in zip(records, has_label, has_score):
        if hl == hs:
            raise DataError(f"{r['path']}: downstream records need exactly one of label/score")
    if all(has_label):
        labels = [int(r["label"]) for r in records]
        if set(labels) - {0, 1}:
            raise DataError("labels must be 0 or 1")
        return BINARY, labels
    if all(has_score):
        return REGRESSION, [float(r["score"]) for r in records]
    raise DataError("manifest mixes labelled and scored records")
