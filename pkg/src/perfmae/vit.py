"""3D vision-transformer encoder.

Patch embedding, fixed 3D sinusoidal positions, pre-norm attention/MLP blocks
and a final layer norm. No class token; downstream heads pool by averaging.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericOverflowError, ShapeError
from .patches import PatchGrid


@dataclass
class ViTConfig:
    embed_dim: int = 768
    n_blocks: int = 12
    n_heads: int = 12
    mlp_dim: int = 3072
    patch_size: int = 12
    volume_shape: Tuple[int, int, int] = (96, 96, 96)

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        problems = []
        if self.embed_dim % self.n_heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % 2 or self.embed_dim < 6:
            problems.append(f"embed_dim {self.embed_dim} must be even and >= 6")
        if self.mlp_dim < self.embed_dim:
            problems.append(f"mlp_dim {self.mlp_dim} < embed_dim {self.embed_dim}")
        if problems:
            raise ConfigError("; ".join(problems))
        PatchGrid(self.volume_shape, self.patch_size)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.volume_shape, self.patch_size)

    def to_dict(self):
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d


def pos_embed_3d(grid: PatchGrid, d: int) -> np.ndarray:
    """Fixed sinusoidal table of shape (N, d).

    The width is split into three d/3 groups, one per grid axis. Within a
    group, slot 2j holds sin(c / 10000^(2j/(d/3))) and slot 2j+1 the cosine.
    """
    if d % 6:
        raise ConfigError(f"positional width {d} must be divisible by 6")
    g = d // 3
    j = np.arange(g // 2, dtype=np.float64)
    inv_freq = 1.0 / 10000.0 ** (2.0 * j / g)
    coords = grid.coords().astype(np.float64)
    table = np.empty((grid.n_patches, d), dtype=np.float64)
    for axis in range(3):
        angle = coords[:, axis : axis + 1] * inv_freq[None, :]
        block = table[:, axis * g : (axis + 1) * g]
        block[:, 0::2] = np.sin(angle)
        block[:, 1::2] = np.cos(angle)
    return table


def padded_pos_embed(grid: PatchGrid, d: int) -> np.ndarray:
    """Positional table for any even width: the trailing ``d % 6`` channels are zero."""
    usable = d - d % 6
    table = np.zeros((grid.n_patches, d), dtype=np.float64)
    table[:, :usable] = pos_embed_3d(grid, usable)
    return table


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        q = self.q(x).view(B, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(B, n, self.n_heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # 64-bit accumulation for the softmax denominator
        return torch.softmax(logits, dim=-1, dtype=torch.float64).to(x.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, n, d = x.shape
        attn = self.attention_weights(x)
        v = self.v(x).view(B, n, self.n_heads, self.head_dim).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(B, n, d)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TransformerStack(nn.Module):
    """Pre-norm blocks followed by a final layer norm."""

    def __init__(self, dim: int, n_blocks: int, n_heads: int, mlp_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, n_heads, mlp_dim) for _ in range(n_blocks))
        self.norm = nn.LayerNorm(dim)
        self.check_finite = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if self.check_finite and not torch.isfinite(x).all():
                raise NumericOverflowError(f"non-finite activations after block {i}", block_index=i)
        return self.norm(x)


class Encoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        grid = cfg.grid
        self.patch_embed = nn.Linear(grid.patch_dim, cfg.embed_dim)
        self.stack = TransformerStack(cfg.embed_dim, cfg.n_blocks, cfg.n_heads, cfg.mlp_dim)
        pe = torch.from_numpy(padded_pos_embed(grid, cfg.embed_dim)).float()
        self.register_buffer("pos_embed", pe, persistent=False)

    def embed_visible(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Embed the rows of ``patches`` (B, N, P^3) listed in ``visible`` (B, |V|).

        Masked rows are never read.
        """
        if patches.shape[-1] != self.patch_embed.in_features:
            raise ShapeError(f"patch length {patches.shape[-1]} != {self.patch_embed.in_features}")
        idx = visible.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        rows = torch.gather(patches, 1, idx)
        return self.patch_embed(rows) + self.pos_embed[visible]

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"token width {tokens.shape[-1]} != {self.cfg.embed_dim}")
        return self.stack(tokens)

    def encode(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        return self.forward(self.embed_visible(patches, visible))


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Truncated-normal (std 0.02, cut at 2 std) linears, zero biases, unit LN.

    Deterministic given ``seed``; parameters are visited in registration order.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
        for name, p in module.named_parameters():
            if name.endswith("mask_token"):
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
    return module
