"""Light MAE decoder and the composed pretraining forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError, UndefinedLossError
from .patches import MaskPlan, PatchGrid, patchify_array, sample_mask, unpatchify_array
from .vit import Encoder, TransformerStack, ViTConfig, init_weights, padded_pos_embed
from .volume import NORMALIZED, Volume


@dataclass
class DecoderConfig:
    dec_dim: int = 384
    n_blocks: int = 4
    n_heads: int = 12
    mlp_dim: int = 1536

    def __post_init__(self):
        if self.dec_dim % self.n_heads or self.dec_dim % 2 or self.dec_dim < 6:
            raise ConfigError(f"dec_dim {self.dec_dim} must be even, >= 6 and divisible by n_heads {self.n_heads}")

    def to_dict(self):
        return asdict(self)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, enc_dim: int, grid: PatchGrid):
        super().__init__()
        self.cfg = cfg
        self.n_patches = grid.n_patches
        self.enc_to_dec = nn.Linear(enc_dim, cfg.dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dec_dim))
        self.stack = TransformerStack(cfg.dec_dim, cfg.n_blocks, cfg.n_heads, cfg.mlp_dim)
        self.pred_head = nn.Linear(cfg.dec_dim, grid.patch_dim)
        pe = torch.from_numpy(padded_pos_embed(grid, cfg.dec_dim)).float()
        self.register_buffer("pos_embed", pe, persistent=False)

    def assemble(self, latents: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Full N-row sequence: projected latents at ``visible``, mask token elsewhere."""
        B, nv, _ = latents.shape
        if visible.shape != (B, nv):
            raise ShapeError(f"latent rows {nv} do not match visible index shape {tuple(visible.shape)}")
        proj = self.enc_to_dec(latents)
        u = self.mask_token.to(proj.dtype).expand(B, self.n_patches, -1)
        idx = visible.unsqueeze(-1).expand(-1, -1, proj.shape[-1])
        u = u.scatter(1, idx, proj)
        return u + self.pos_embed

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.shape[1] != self.n_patches or u.shape[-1] != self.cfg.dec_dim:
            raise ShapeError(f"decoder input {tuple(u.shape)} expected (*, {self.n_patches}, {self.cfg.dec_dim})")
        return self.pred_head(self.stack(u))


class MaskedAutoencoder(nn.Module):
    def __init__(self, enc_cfg: ViTConfig, dec_cfg: DecoderConfig):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.grid = enc_cfg.grid
        self.encoder = Encoder(enc_cfg)
        self.decoder = Decoder(dec_cfg, enc_cfg.embed_dim, self.grid)

    def forward(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Predict all N patches from the visible ones. ``patches``: (B, N, P^3)."""
        latents = self.encoder.encode(patches, visible)
        return self.decoder(self.decoder.assemble(latents, visible))

    def loss(self, patches: torch.Tensor, visible: torch.Tensor, masked: torch.Tensor):
        """Per-sample masked loss (B,) and predictions (B, N, P^3)."""
        if masked.shape[1] == 0:
            raise UndefinedLossError("masked loss is undefined for an empty mask")
        pred = self(patches, visible)
        idx = masked.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        diff = torch.gather(pred, 1, idx) - torch.gather(patches, 1, idx)
        per_sample = (diff * diff).sum(dim=(1, 2)) / masked.shape[1]
        return per_sample, pred


def build_mae(enc_cfg: ViTConfig, dec_cfg: DecoderConfig, seed: int) -> MaskedAutoencoder:
    return init_weights(MaskedAutoencoder(enc_cfg, dec_cfg), seed)


def plans_to_index(plans: Sequence[MaskPlan]):
    visible = torch.from_numpy(np.stack([p.visible for p in plans])).long()
    masked = torch.from_numpy(np.stack([p.masked for p in plans])).long()
    return visible, masked


def mae_forward_loss(vol: Volume, ratio: float, model: MaskedAutoencoder, rng: np.random.Generator):
    """One-volume pretraining step: returns ``(loss tensor, predictions, plan)``.

    ``loss`` keeps its autograd graph, so ``loss.backward()`` fills the
    gradient of every learnable tensor.
    """
    if vol.intensity_unit != NORMALIZED:
        raise ShapeError("mae_forward_loss expects a normalized volume")
    P = model.enc_cfg.patch_size
    if vol.shape != model.grid.volume_shape:
        raise ShapeError(f"volume shape {vol.shape} != model grid {model.grid.volume_shape}")
    dtype = next(model.parameters()).dtype
    patches = torch.from_numpy(patchify_array(vol.data, P)).to(dtype).unsqueeze(0)
    plan = sample_mask(model.grid.n_patches, ratio, rng)
    visible, masked = plans_to_index([plan])
    per_sample, pred = model.loss(patches, visible, masked)
    return per_sample[0], pred[0], plan


def stitch_reconstruction(vol: Volume, pred: np.ndarray, plan: MaskPlan, patch_size: int) -> Volume:
    """Ground-truth patches at visible positions, predictions at masked ones."""
    grid = PatchGrid(vol.shape, patch_size)
    target = patchify_array(vol.data, patch_size)
    pred = np.asarray(pred, dtype=np.float32)
    if pred.shape != target.shape or plan.n_patches != grid.n_patches:
        raise ShapeError(f"prediction shape {pred.shape} inconsistent with volume patches {target.shape}")
    out = target.copy()
    out[plan.masked] = pred[plan.masked]
    data = unpatchify_array(out, grid)
    if vol.intensity_unit == NORMALIZED:
        data = np.clip(data, 0.0, 1.0)
    return Volume(data=data, voxel_size_mm=vol.voxel_size_mm, intensity_unit=vol.intensity_unit)


def masked_input(vol: Volume, plan: MaskPlan, patch_size: int) -> Volume:
    grid = PatchGrid(vol.shape, patch_size)
    patches = patchify_array(vol.data, patch_size).copy()
    patches[plan.masked] = 0.0
    return Volume(unpatchify_array(patches, grid), vol.voxel_size_mm, vol.intensity_unit)
