"""Optimization and MAE pretraining: AdamW, warmup+cosine schedule,
soft-balanced sampling and the epoch loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import Checkpoint, as_torch, load_checkpoint, save_checkpoint
from .decoder import DecoderConfig, MaskedAutoencoder, build_mae, plans_to_index
from .errors import ConfigError, DataError, NonFiniteGradientError, NumericError, ScheduleRangeError
from .patches import patchify_array, sample_mask
from .vit import ViTConfig
from .volume import NORMALIZED, load_ivol, load_nifti, load_volume, preprocess

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, base_lr: float, epochs: int, warmup_epochs: int, steps_per_epoch: int) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to zero, per optimizer step."""
    warm = warmup_epochs * steps_per_epoch
    total = epochs * steps_per_epoch
    if not 0 <= step < total:
        raise ScheduleRangeError(f"step {step} outside [0, {total})")
    if step < warm:
        return base_lr * ((step + 1) / warm)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm))))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWHyper:
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


class AdamW:
    """Decoupled-weight-decay Adam over a name -> parameter mapping."""

    def __init__(self, params: Mapping[str, torch.Tensor], hyper: AdamWHyper):
        self.params = dict(params)
        self.hyper = hyper
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float, grads: Optional[Mapping[str, torch.Tensor]] = None) -> None:
        h = self.hyper
        if grads is None:
            grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}
        for name, g in grads.items():
            if not torch.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name}", tensor_name=name)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - h.beta1 ** t
        bc2 = 1.0 - h.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m.mul_(h.beta1).add_(g, alpha=1.0 - h.beta1)
            v.mul_(h.beta2).addcmul_(g, g, value=1.0 - h.beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + h.eps) + h.weight_decay * p
            p.sub_(lr * update)

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"optim.exp_avg.{k}"] = self.exp_avg[k]
            out[f"optim.exp_avg_sq.{k}"] = self.exp_avg_sq[k]
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], step_count: int) -> None:
        for k, p in self.params.items():
            self.exp_avg[k] = as_torch(tensors[f"optim.exp_avg.{k}"]).to(p.dtype)
            self.exp_avg_sq[k] = as_torch(tensors[f"optim.exp_avg_sq.{k}"]).to(p.dtype)
        self.step_count = int(step_count)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sampling_weights(study_ids: Sequence[str], alpha_bal: float) -> np.ndarray:
    """Per-scan weight n_j^(-alpha) where n_j is the size of the scan's study.

    A study's total mass is then proportional to n_j^(1 - alpha): alpha=0 keeps
    the natural mix, alpha=1 gives every study equal mass.
    """
    if len(study_ids) == 0:
        raise DataError("empty manifest")
    if not 0.0 <= alpha_bal <= 1.0:
        raise ConfigError(f"alpha_bal must lie in [0, 1], got {alpha_bal}")
    ids, inverse, counts = np.unique(np.asarray(study_ids, dtype=object).astype(str), return_inverse=True, return_counts=True)
    return counts[inverse].astype(np.float64) ** (-alpha_bal)


def draw_indices(weights: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(weights), size=n_draws, replace=True, p=weights / weights.sum())


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------


def model_checkpoint(model: MaskedAutoencoder, optimizer: Optional[AdamW] = None, step: int = 0,
                     rng_state=None, extra: Optional[dict] = None) -> Checkpoint:
    tensors = {k: v for k, v in model.state_dict().items()}
    meta = {
        "stage": "pretrain",
        "model": {"encoder": model.enc_cfg.to_dict(), "decoder": model.dec_cfg.to_dict()},
        "step": int(step),
        "rng_state": rng_state,
    }
    if optimizer is not None:
        meta["optimizer"] = asdict(optimizer.hyper)
        tensors.update(optimizer.state_tensors())
    if extra:
        meta.update(extra)
    return Checkpoint(meta=meta, tensors=tensors)


def configs_from_meta(meta: dict) -> Tuple[ViTConfig, DecoderConfig]:
    try:
        return ViTConfig(**meta["model"]["encoder"]), DecoderConfig(**meta["model"]["decoder"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint has no usable model config ({exc})") from exc


def model_from_checkpoint(ckpt: Checkpoint) -> MaskedAutoencoder:
    enc_cfg, dec_cfg = configs_from_meta(ckpt.meta)
    model = MaskedAutoencoder(enc_cfg, dec_cfg)
    state = {k: as_torch(v) for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    dtypes = {v.dtype for v in state.values()}
    if torch.float64 in dtypes:
        model = model.double()
    model.load_state_dict(state, strict=True)
    return model


# ---------------------------------------------------------------------------
# pretraining loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainPlan:
    epochs: int = 400
    warmup_epochs: int = 40
    batch_size: int = 48
    rho: float = 0.5
    alpha_bal: float = 0.5
    seed: int = 0
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    checkpoint_every: int = 0
    grad_clip: Optional[float] = None
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.base_lr, self.weight_decay, self.beta1, self.beta2, self.eps)


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    checkpoint: Checkpoint
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    steps_per_epoch: int = 0


_LOADERS = {"auto": load_volume, "ivol": load_ivol, "nifti": load_nifti}


def load_dataset(records: Sequence[dict], grid: Sequence[int], crop_threshold: float = 0.0,
                 fmt: str = "auto") -> np.ndarray:
    """Load and preprocess every manifest volume into one (n, H, W, D) float32 array.

    ``fmt`` is "auto" (sniff the file), "ivol" or "nifti".
    """
    if fmt not in _LOADERS:
        raise ConfigError(f"unknown data format {fmt!r}")
    loader = _LOADERS[fmt]
    out = np.empty((len(records), *grid), dtype=np.float32)
    for i, rec in enumerate(records):
        try:
            vol = preprocess(loader(rec["path"]), grid, crop_threshold)
        except DataError as exc:
            raise type(exc)(f"{rec['path']}: {exc}") from exc
        except OSError as exc:
            raise DataError(f"{rec['path']}: {exc}") from exc
        if vol.intensity_unit != NORMALIZED:
            raise DataError(f"{rec['path']}: volume is not normalized")
        out[i] = vol.data
    return out


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)


def run_pretraining(
    volumes: np.ndarray,
    study_ids: Sequence[str],
    enc_cfg: ViTConfig,
    dec_cfg: DecoderConfig,
    plan: PretrainPlan,
    out_dir=None,
    paths: Optional[Sequence[str]] = None,
) -> PretrainResult:
    """Pretrain an MAE on ``volumes`` (n, H, W, D), already normalized.

    One epoch is ceil(n / batch_size) optimizer steps, each drawing
    ``batch_size`` scans with replacement under the soft-balanced weights.
    """
    set_deterministic(plan.deterministic)
    n = len(volumes)
    if n == 0:
        raise DataError("empty manifest")
    P = enc_cfg.patch_size
    patches = torch.from_numpy(patchify_array(volumes, P))
    model = build_mae(enc_cfg, dec_cfg, plan.seed)
    params = dict(model.named_parameters())
    opt = AdamW(params, plan.hyper)
    weights = sampling_weights(study_ids, plan.alpha_bal)
    sampler = np.random.default_rng(plan.seed)
    steps_per_epoch = math.ceil(n / plan.batch_size)
    n_patches = enc_cfg.grid.n_patches

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        epoch_log = open(out_dir / "train_log.jsonl", "w")
        step_log = open(out_dir / "step_log.jsonl", "w")
    else:
        epoch_log = step_log = None

    def snapshot(step: int) -> Checkpoint:
        return model_checkpoint(
            model, opt, step, sampler.bit_generator.state,
            extra={"pretrain": asdict(plan), "steps_per_epoch": steps_per_epoch, "n_scans": n},
        )

    step_losses, epoch_losses = [], []
    step = 0
    t0 = time.time()
    try:
        for epoch in range(plan.epochs):
            idx = draw_indices(weights, steps_per_epoch * plan.batch_size, sampler)
            running = []
            for b in range(steps_per_epoch):
                batch = idx[b * plan.batch_size : (b + 1) * plan.batch_size]
                plans = [
                    sample_mask(n_patches, plan.rho, np.random.default_rng([plan.seed, 1, step, i]))
                    for i in range(len(batch))
                ]
                visible, masked = plans_to_index(plans)
                lr = lr_at(step, plan.base_lr, plan.epochs, plan.warmup_epochs, steps_per_epoch)
                model.zero_grad(set_to_none=True)
                per_sample, _ = model.loss(patches[torch.from_numpy(batch)], visible, masked)
                loss = per_sample.mean()
                if not torch.isfinite(loss):
                    bad = paths[int(batch[0])] if paths else ""
                    raise NumericError(f"non-finite loss at step {step} {bad}".rstrip())
                loss.backward()
                if plan.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), plan.grad_clip)
                opt.step(lr)
                val = float(loss.detach())
                step_losses.append(val)
                running.append(val)
                if step_log:
                    step_log.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, "loss": val}) + "\n")
                step += 1
            epoch_losses.append(float(np.mean(running)))
            if epoch_log:
                epoch_log.write(json.dumps({"epoch": epoch, "step": step - 1, "lr": lr, "loss": epoch_losses[-1]}) + "\n")
                epoch_log.flush()
            log.info("epoch %d loss %.5f lr %.3g (%.1fs)", epoch, epoch_losses[-1], lr, time.time() - t0)
            if out_dir is not None and plan.checkpoint_every and (epoch + 1) % plan.checkpoint_every == 0:
                save_checkpoint(snapshot(step), out_dir / f"checkpoint_epoch{epoch + 1:04d}.ichk")
    finally:
        if epoch_log:
            epoch_log.close()
            step_log.close()

    ckpt = snapshot(step)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.ichk")
    return PretrainResult(model, ckpt, step_losses, epoch_losses, steps_per_epoch)


def resume_optimizer(ckpt: Checkpoint, model: MaskedAutoencoder) -> AdamW:
    hyper = AdamWHyper(**ckpt.meta["optimizer"])
    opt = AdamW(dict(model.named_parameters()), hyper)
    opt.load_state_tensors(ckpt.tensors, ckpt.meta.get("step", 0))
    return opt


def load_pretrained(path) -> MaskedAutoencoder:
    return model_from_checkpoint(load_checkpoint(path))
