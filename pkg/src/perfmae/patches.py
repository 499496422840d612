"""Non-overlapping 3D patch grids, random masking and the masked reconstruction loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import MaskRatioError, ShapeError, UndefinedLossError
from .volume import Volume


@dataclass(frozen=True)
class PatchGrid:
    volume_shape: Tuple[int, int, int]
    patch_size: int

    def __post_init__(self):
        P = self.patch_size
        if P < 1 or any(s % P for s in self.volume_shape):
            raise ShapeError(f"patch size {P} does not divide volume shape {self.volume_shape}")

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(s // self.patch_size for s in self.volume_shape)

    @property
    def n_patches(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 3

    def coords(self) -> np.ndarray:
        """(N, 3) grid coordinates, row-major with the last axis fastest."""
        return np.stack(np.unravel_index(np.arange(self.n_patches), self.grid), axis=1)


@dataclass(frozen=True)
class MaskPlan:
    n_patches: int
    masked: np.ndarray
    visible: np.ndarray
    ratio: float

    def is_masked(self) -> np.ndarray:
        out = np.zeros(self.n_patches, dtype=bool)
        out[self.masked] = True
        return out


def patchify_array(x: np.ndarray, P: int) -> np.ndarray:
    """Array version of :func:`patchify` for ``(..., H, W, D)`` inputs."""
    *lead, H, W, D = x.shape
    if H % P or W % P or D % P:
        raise ShapeError(f"patch size {P} does not divide {(H, W, D)}")
    gh, gw, gd = H // P, W // P, D // P
    y = x.reshape(*lead, gh, P, gw, P, gd, P)
    n = len(lead)
    perm = list(range(n)) + [n + 0, n + 2, n + 4, n + 1, n + 3, n + 5]
    return np.ascontiguousarray(y.transpose(perm)).reshape(*lead, gh * gw * gd, P ** 3)


def unpatchify_array(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    *lead, N, L = patches.shape
    P = grid.patch_size
    if N != grid.n_patches or L != P ** 3:
        raise ShapeError(f"patch array {patches.shape[-2:]} inconsistent with grid ({grid.n_patches}, {P ** 3})")
    gh, gw, gd = grid.grid
    y = patches.reshape(*lead, gh, gw, gd, P, P, P)
    n = len(lead)
    perm = list(range(n)) + [n + 0, n + 3, n + 1, n + 4, n + 2, n + 5]
    return np.ascontiguousarray(y.transpose(perm)).reshape(*lead, *grid.volume_shape)


def patchify(vol: Volume, P: int):
    """Split a volume into N rows of P**3 voxels; returns ``(patches, grid)``."""
    grid = PatchGrid(vol.shape, P)
    return patchify_array(vol.data, P), grid


def unpatchify(patches: np.ndarray, grid: PatchGrid, like: Volume = None) -> Volume:
    data = unpatchify_array(np.asarray(patches), grid)
    if like is None:
        return Volume(data=data)
    return Volume(data=data, voxel_size_mm=like.voxel_size_mm, intensity_unit=like.intensity_unit)


def n_masked(n_patches: int, ratio: float) -> int:
    # Python's round() is ties-to-even
    return int(round(ratio * n_patches))


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform random subset of size round(ratio*N) via a partial Fisher-Yates shuffle."""
    if not 0.0 <= ratio <= 1.0:
        raise MaskRatioError(f"mask ratio must lie in [0, 1], got {ratio}")
    m = n_masked(n_patches, ratio)
    perm = np.arange(n_patches)
    for t in range(m):
        j = int(rng.integers(t, n_patches))
        perm[t], perm[j] = perm[j], perm[t]
    masked = np.sort(perm[:m])
    visible = np.sort(perm[m:])
    return MaskPlan(n_patches=n_patches, masked=masked, visible=visible, ratio=ratio)


def masked_mse(pred: np.ndarray, target: np.ndarray, plan: MaskPlan):
    """Mean over masked patches of the per-patch squared L2 error.

    Returns ``(loss, grad)`` with ``grad`` the derivative w.r.t. ``pred``.
    Note the value is P**3 times the per-voxel MSE on masked voxels.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.shape[0] != plan.n_patches:
        raise ShapeError(f"pred {pred.shape} / target {target.shape} vs {plan.n_patches} patches")
    m = len(plan.masked)
    if m == 0:
        raise UndefinedLossError("masked loss is undefined for an empty mask")
    diff = pred[plan.masked].astype(np.float64) - target[plan.masked]
    loss = float(np.sum(diff * diff) / m)
    grad = np.zeros(pred.shape, dtype=np.float64)
    grad[plan.masked] = 2.0 * diff / m
    return loss, grad.astype(pred.dtype, copy=False)
