"""Downstream adaptation: LoRA on the encoder's attention projections,
GAP + norm + linear task head, task losses and the fine-tuning loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, as_torch, tensor_hash
from .errors import ConfigError, DataError, FrozenWeightMutationError, ShapeError, UndefinedMetricError
from .train import AdamW, AdamWHyper, lr_at, set_deterministic
from .vit import Encoder, init_weights

log = logging.getLogger(__name__)

BINARY = "binary_classification"
REGRESSION = "regression"
LORA_TARGETS = ("q", "k", "v", "o")


@dataclass
class LoRASpec:
    r: int = 8
    alpha: float = 16.0
    dropout: float = 0.2
    targets: Sequence[str] = LORA_TARGETS

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"LoRA dropout must lie in [0, 1), got {self.dropout}")
        self.targets = tuple(self.targets)
        unknown = set(self.targets) - set(LORA_TARGETS)
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.r


class LoRALinear(nn.Module):
    """Frozen base linear plus a scaled low-rank update ``(alpha/r) B A``."""

    def __init__(self, base: nn.Linear, spec: LoRASpec):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.scale = spec.scale
        self.dropout = spec.dropout
        dt = base.weight.dtype
        self.lora_A = nn.Parameter(torch.zeros(spec.r, base.in_features, dtype=dt))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, spec.r, dtype=dt))

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.dropout(x, self.dropout, self.training) if self.dropout else x
        return self.base(x) + self.scale * F.linear(F.linear(h, self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return merge_lora(self.base.weight, self.lora_A, self.lora_B, self.scale)


def lora_forward(x, W, b, A, B, spec: LoRASpec, train_mode: bool = False, generator=None):
    """Functional form of :class:`LoRALinear` for a single vector or a batch of rows."""
    if A.shape[1] != W.shape[1] or B.shape[0] != W.shape[0] or A.shape[0] != B.shape[1]:
        raise ShapeError(f"LoRA shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit W{tuple(W.shape)}")
    h = x
    if train_mode and spec.dropout:
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= spec.dropout
        h = x * keep / (1.0 - spec.dropout)
    return F.linear(x, W, b) + spec.scale * F.linear(F.linear(h, A), B)


def merge_lora(W: torch.Tensor, A: torch.Tensor, B: torch.Tensor, scale: float) -> torch.Tensor:
    if B.shape[0] != W.shape[0] or A.shape[1] != W.shape[1] or A.shape[0] != B.shape[1]:
        raise ShapeError(f"LoRA shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit W{tuple(W.shape)}")
    return W + scale * (B @ A)


def inject_lora(encoder: Encoder, spec: LoRASpec, seed: int) -> List[LoRALinear]:
    """Wrap the targeted attention projections of every block in place."""
    gen = torch.Generator().manual_seed(int(seed))
    adapters = []
    for blk in encoder.stack.blocks:
        for name in spec.targets:
            base = getattr(blk.attn, name)
            if isinstance(base, LoRALinear):
                raise ConfigError("encoder already carries LoRA adapters")
            wrapped = LoRALinear(base, spec)
            with torch.no_grad():
                nn.init.trunc_normal_(wrapped.lora_A, std=0.02, a=-0.04, b=0.04, generator=gen)
            setattr(blk.attn, name, wrapped)
            adapters.append(wrapped)
    return adapters


def merge_adapters(encoder: Encoder) -> Encoder:
    """Copy of ``encoder`` with every LoRA wrapper folded into a plain linear."""
    merged = copy.deepcopy(encoder)
    for blk in merged.stack.blocks:
        for name in LORA_TARGETS:
            mod = getattr(blk.attn, name)
            if isinstance(mod, LoRALinear):
                lin = nn.Linear(mod.in_features, mod.out_features, dtype=mod.base.weight.dtype)
                with torch.no_grad():
                    lin.weight.copy_(mod.merged_weight())
                    lin.bias.copy_(mod.base.bias)
                setattr(blk.attn, name, lin)
    return merged


class TaskHead(nn.Module):
    """Layer norm then a single linear unit on the pooled token vector."""

    def __init__(self, dim: int, task_kind: str = BINARY):
        super().__init__()
        if task_kind not in (BINARY, REGRESSION):
            raise ConfigError(f"unknown task kind {task_kind!r}")
        self.task_kind = task_kind
        self.norm = nn.LayerNorm(dim)
        self.linear = nn.Linear(dim, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2] == 0:
            raise ShapeError("cannot pool an empty token sequence")
        return self.linear(self.norm(z.mean(dim=-2))).squeeze(-1)


def head_forward(z: torch.Tensor, head: TaskHead) -> torch.Tensor:
    return head(z)


class DownstreamModel(nn.Module):
    def __init__(self, encoder: Encoder, head: TaskHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def encode_full(self, patches: torch.Tensor) -> torch.Tensor:
        """Encode all N patches (no masking). ``patches``: (B, N, P^3)."""
        B, N, _ = patches.shape
        visible = torch.arange(N).expand(B, N)
        return self.encoder.encode(patches, visible)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode_full(patches))

    def predict(self, patches: torch.Tensor) -> torch.Tensor:
        """Probability of class 1, or the squashed regression score."""
        return torch.sigmoid(self(patches))

    def base_tensors(self) -> Dict[str, torch.Tensor]:
        # names as in the un-wrapped encoder, so hashes match the pretrained state
        return {k.replace(".base.", "."): v for k, v in self.encoder.state_dict().items() if "lora_" not in k}

    def adapter_tensors(self) -> Dict[str, torch.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items() if "lora_" in k}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return out


def build_downstream(encoder: Encoder, spec: LoRASpec, task_kind: str, seed: int) -> DownstreamModel:
    """Deep-copy ``encoder``, inject adapters and attach a fresh head."""
    enc = copy.deepcopy(encoder)
    for p in enc.parameters():
        p.requires_grad_(False)
    inject_lora(enc, spec, seed)
    head = init_weights(TaskHead(enc.cfg.embed_dim, task_kind), seed + 1)
    dtype = next(enc.parameters()).dtype
    return DownstreamModel(enc, head.to(dtype))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def class_weights(labels: Sequence[int]) -> Dict[int, float]:
    """w_y = n_total / (2 n_y)."""
    labels = np.asarray(labels)
    n = len(labels)
    out = {}
    for y in (0, 1):
        n_y = int(np.sum(labels == y))
        if n_y == 0:
            raise DataError(f"class {y} absent; cannot weight the loss")
        out[y] = n / (2.0 * n_y)
    return out


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def weighted_bce(logit: float, label: int, weights: Optional[Dict[int, float]] = None):
    """Class-weighted binary cross-entropy from a logit. Returns ``(loss, dloss/dlogit)``."""
    w = 1.0 if weights is None else weights[int(label)]
    if label == 1:
        loss = _softplus(-logit)
    else:
        loss = _softplus(logit)
    sigma = 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else math.exp(logit) / (1.0 + math.exp(logit))
    return w * loss, w * (sigma - label)


def weighted_bce_torch(logits: torch.Tensor, labels: torch.Tensor, weights: Dict[int, float]) -> torch.Tensor:
    w = torch.where(labels > 0.5, weights[1], weights[0]).to(logits.dtype)
    return (w * F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")).mean()


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneHyper:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 8
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise ConfigError("fine-tune epochs/warmup must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")


@dataclass
class FinetuneResult:
    model: DownstreamModel
    best_epoch: int
    best_metric: float
    history: List[dict] = field(default_factory=list)
    base_hash: str = ""


def _predict(model: DownstreamModel, patches: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            outs.append(model.predict(patches[i : i + batch_size]))
    return torch.cat(outs).double().numpy() if outs else np.zeros(0)


def validation_score(task_kind: str, outputs: np.ndarray, targets: np.ndarray, weights=None) -> Tuple[float, float]:
    """Selection key, higher is better: (AUC, -weighted BCE) or (-MSE, -MSE).

    ``outputs`` are raw head outputs (logits). The loss term breaks AUC ties,
    which are common on small validation sets.
    """
    from .metrics import auc

    if task_kind == BINARY:
        probs = 1.0 / (1.0 + np.exp(-outputs))
        w = np.where(targets > 0.5, weights[1], weights[0]) if weights else np.ones_like(targets)
        bce = np.mean(w * (np.logaddexp(0.0, -outputs) * targets + np.logaddexp(0.0, outputs) * (1 - targets)))
        try:
            return auc(probs, targets), -float(bce)
        except UndefinedMetricError:
            return float("nan"), -float(bce)
    mse = float(np.mean((1.0 / (1.0 + np.exp(-outputs)) - targets) ** 2))
    return -mse, -mse


def _raw_outputs(model: "DownstreamModel", patches: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            outs.append(model(patches[i : i + batch_size]))
    return torch.cat(outs).double().numpy() if outs else np.zeros(0)


def _better(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    if not np.isfinite(a[0]):
        return False
    if not np.isfinite(b[0]):
        return True
    return a > b


def run_finetune(
    encoder: Encoder,
    train_patches: torch.Tensor,
    train_targets: np.ndarray,
    val_patches: torch.Tensor,
    val_targets: np.ndarray,
    task_kind: str,
    spec: LoRASpec,
    hyper: FinetuneHyper,
) -> FinetuneResult:
    """Train adapters and head on a frozen copy of ``encoder``.

    The returned model carries the state with the best validation score
    (AUC, or lowest MSE for regression); ties keep the earlier epoch.
    """
    set_deterministic(hyper.deterministic)
    torch.manual_seed(hyper.seed)
    model = build_downstream(encoder, spec, task_kind, hyper.seed)
    base_hash = tensor_hash(model.base_tensors())
    dtype = next(model.parameters()).dtype
    train_patches = train_patches.to(dtype)
    val_patches = val_patches.to(dtype)
    y_train = torch.as_tensor(np.asarray(train_targets, dtype=np.float64)).to(dtype)
    val_targets = np.asarray(val_targets, dtype=np.float64)

    trainable = {k: p for k, p in model.named_parameters() if p.requires_grad}
    opt = AdamW(trainable, AdamWHyper(hyper.base_lr, hyper.weight_decay))
    weights = class_weights(train_targets) if task_kind == BINARY else None
    n = len(train_patches)
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    rng = np.random.default_rng([hyper.seed, 2])

    best_state = copy.deepcopy(model.state_dict())
    best_key = validation_score(task_kind, _raw_outputs(model, val_patches), val_targets, weights)
    best_epoch = -1
    history = []
    step = 0
    for epoch in range(hyper.epochs):
        model.train()
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * hyper.batch_size : (b + 1) * hyper.batch_size])
            lr = lr_at(step, hyper.base_lr, hyper.epochs, hyper.warmup_epochs, steps_per_epoch)
            model.zero_grad(set_to_none=True)
            out = model(train_patches[idx])
            if task_kind == BINARY:
                loss = weighted_bce_torch(out, y_train[idx], weights)
            else:
                loss = F.mse_loss(torch.sigmoid(out), y_train[idx])
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.detach()))
            step += 1
        key = validation_score(task_kind, _raw_outputs(model, val_patches), val_targets, weights)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_metric": key[0], "val_loss": -key[1]})
        log.debug("finetune epoch %d loss %.4f val %.4f", epoch, history[-1]["loss"], key[0])
        if _better(key, best_key):
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())

    if tensor_hash(model.base_tensors()) != base_hash:
        raise FrozenWeightMutationError("a frozen encoder tensor changed during fine-tuning")
    model.load_state_dict(best_state)
    model.eval()
    return FinetuneResult(model, best_epoch, float(best_key[0]), history, base_hash)


def adapter_checkpoint(result: FinetuneResult, spec: LoRASpec, hyper: FinetuneHyper,
                       base_meta: dict, embed_base: bool = False) -> Checkpoint:
    tensors = dict(result.model.adapter_tensors())
    if embed_base:
        tensors.update({f"base.{k}": v for k, v in result.model.base_tensors().items()})
    meta = {
        "stage": "adapter",
        "base_hash": result.base_hash,
        "model": base_meta.get("model"),
        "task_kind": result.model.head.task_kind,
        "lora": {"r": spec.r, "alpha": spec.alpha, "dropout": spec.dropout, "targets": list(spec.targets)},
        "finetune": asdict(hyper),
        "best_epoch": result.best_epoch,
        "best_val_metric": result.best_metric,
    }
    return Checkpoint(meta=meta, tensors=tensors)


def downstream_from_checkpoint(ckpt: Checkpoint, encoder: Optional[Encoder] = None) -> DownstreamModel:
    """Rebuild an adapted model; ``encoder`` is the base unless the checkpoint embeds it."""
    from .train import configs_from_meta

    if ckpt.meta.get("stage") != "adapter":
        raise ConfigError("not an adapter checkpoint")
    enc_cfg, _ = configs_from_meta(ckpt.meta)
    if encoder is None:
        base = {k[5:]: as_torch(v) for k, v in ckpt.tensors.items() if k.startswith("base.")}
        if not base:
            raise ConfigError("adapter checkpoint has no embedded base; pass the pretrained encoder")
        encoder = Encoder(enc_cfg)
        if any(v.dtype == torch.float64 for v in base.values()):
            encoder = encoder.double()
        encoder.load_state_dict(base)
    if tensor_hash({k: v for k, v in encoder.state_dict().items()}) != ckpt.meta["base_hash"]:
        raise ConfigError("base encoder does not match the adapter checkpoint's reference hash")
    spec = LoRASpec(**ckpt.meta["lora"])
    model = build_downstream(encoder, spec, ckpt.meta["task_kind"], 0)
    enc_state = {k[8:]: as_torch(v) for k, v in ckpt.tensors.items() if k.startswith("encoder.")}
    head_state = {k[5:]: as_torch(v) for k, v in ckpt.tensors.items() if k.startswith("head.")}
    missing = model.encoder.load_state_dict(enc_state, strict=False)
    if missing.unexpected_keys:
        raise ConfigError(f"unexpected adapter tensors {missing.unexpected_keys}")
    model.head.load_state_dict(head_state)
    model.eval()
    return model
