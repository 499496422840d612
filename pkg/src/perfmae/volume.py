"""Volumetric data: container type, NIfTI-1 / IVOL I/O, preprocessing and phantoms."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    BadMagicError,
    DimensionalityError,
    EmptyForegroundError,
    HeaderError,
    LesionOutsideGridError,
    NonFiniteDataError,
    PayloadLengthError,
    ShapeError,
    UnitError,
    UnsupportedDatatypeError,
)

RAW_CBF = "raw_cbf_ml_per_100g_min"
NORMALIZED = "normalized_unit_interval"
INTENSITY_UNITS = (RAW_CBF, NORMALIZED)

PathLike = Union[str, Path]


@dataclass
class Volume:
    """A 3D scalar field.

    ``data`` is indexed ``[i, j, k]`` with shape ``(H, W, D)``. On disk the
    storage order is i-fastest (Fortran order), matching NIfTI.
    """

    data: np.ndarray
    voxel_size_mm: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    intensity_unit: str = NORMALIZED

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {data.shape}")
        if any(s < 1 for s in data.shape):
            raise ShapeError(f"volume dims must be positive, got {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        self.data = data
        self.voxel_size_mm = tuple(float(x) for x in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or not all(x > 0 for x in self.voxel_size_mm):
            raise HeaderError(f"voxel_size_mm must be three positive reals, got {self.voxel_size_mm}")
        if self.intensity_unit not in INTENSITY_UNITS:
            raise UnitError(f"unknown intensity unit {self.intensity_unit!r}")
        if not np.isfinite(data).all():
            raise NonFiniteDataError("volume contains NaN or Inf")
        if self.intensity_unit == NORMALIZED and data.size and (data.min() < 0 or data.max() > 1):
            raise UnitError("normalized volume has values outside [0, 1]")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_NIFTI_HDR_SIZE = 348


def _read_maybe_gzip(path: PathLike) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_nifti(path: PathLike) -> Volume:
    buf = _read_maybe_gzip(path)
    if len(buf) < _NIFTI_HDR_SIZE:
        raise HeaderError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", buf, 0)[0] == _NIFTI_HDR_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == _NIFTI_HDR_SIZE:
        endian = ">"
    else:
        raise HeaderError(f"{path}: sizeof_hdr is not 348 in either byte order")
    if buf[344:348] != b"n+1\x00":
        raise BadMagicError(f"{path}: bad NIfTI magic {buf[344:348]!r}")

    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset = struct.unpack_from(endian + "f", buf, 108)[0]
    slope, inter = struct.unpack_from(endian + "2f", buf, 112)

    if dim[0] not in (3, 4):
        raise DimensionalityError(f"{path}: dim[0]={dim[0]}, expected 3 or 4")
    if dim[0] == 4 and dim[4] != 1:
        raise DimensionalityError(f"{path}: 4D image with {dim[4]} frames, only single-frame supported")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {datatype}")
    shape = tuple(int(d) for d in dim[1:4])
    if any(s < 1 for s in shape):
        raise HeaderError(f"{path}: non-positive dims {shape}")

    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    offset = int(vox_offset)
    if len(buf) < offset + count * dtype.itemsize:
        raise PayloadLengthError(f"{path}: payload shorter than {count} voxels")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)

    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope == 1.0 and inter == 0.0 and dtype.kind == "f" and dtype.itemsize == 4:
        values = raw.astype(np.float32)
    else:
        values = (raw.astype(np.float64) * slope + inter).astype(np.float32)
    if not np.isfinite(values).all():
        raise NonFiniteDataError(f"{path}: non-finite values after scaling")

    data = values.reshape(shape, order="F")
    vox = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return Volume(data=data, voxel_size_mm=vox, intensity_unit=RAW_CBF)


def write_nifti(vol: Volume, path: PathLike) -> None:
    """Write a float32 NIfTI-1 single file (gzip if the name ends in .gz)."""
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    H, W, D = vol.shape
    struct.pack_into("<8h", hdr, 40, 3, H, W, D, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.voxel_size_mm, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    blob = bytes(hdr) + payload
    if str(path).endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    Path(path).write_bytes(blob)


# ---------------------------------------------------------------------------
# IVOL container
# ---------------------------------------------------------------------------

IVOL_MAGIC = b"IVOL0001"


def write_ivol(vol: Volume, path: PathLike) -> None:
    header = json.dumps(
        {
            "shape": list(vol.shape),
            "voxel_size_mm": list(vol.voxel_size_mm),
            "intensity_unit": vol.intensity_unit,
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(IVOL_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_ivol(path: PathLike) -> Volume:
    buf = Path(path).read_bytes()
    if buf[:8] != IVOL_MAGIC:
        raise BadMagicError(f"{path}: not an IVOL file")
    if len(buf) < 16:
        raise HeaderError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    if 16 + hlen > len(buf):
        raise HeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        shape = tuple(header["shape"])
        vox = tuple(header["voxel_size_mm"])
        unit = header["intensity_unit"]
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"{path}: malformed header ({exc})") from exc
    if len(shape) != 3 or not all(isinstance(s, int) and s > 0 for s in shape):
        raise HeaderError(f"{path}: invalid shape {list(shape)}")
    payload = buf[16 + hlen :]
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise PayloadLengthError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape, order="F").astype(np.float32)
    return Volume(data=data, voxel_size_mm=vox, intensity_unit=unit)


def load_volume(path: PathLike) -> Volume:
    """Dispatch on content: IVOL magic, otherwise NIfTI-1."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == IVOL_MAGIC:
        return load_ivol(path)
    return load_nifti(path)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def normalize_cbf(vol: Volume) -> Volume:
    """Clip raw CBF to [0, 100] ml/100g/min and rescale to [0, 1]."""
    if vol.intensity_unit != RAW_CBF:
        raise UnitError(f"normalize_cbf expects {RAW_CBF}, got {vol.intensity_unit}")
    out = np.clip(vol.data, 0.0, 100.0) / np.float32(100.0)
    return replace(vol, data=out.astype(np.float32), intensity_unit=NORMALIZED)


def crop_bounding_box(vol: Volume, threshold: float = 0.0) -> Volume:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    fg = vol.data > threshold
    if not fg.any():
        raise EmptyForegroundError(f"no voxel above threshold {threshold}")
    slices = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return replace(vol, data=np.ascontiguousarray(vol.data[tuple(slices)]))


def _axis_weights(src: int, dst: int):
    if dst == 1:
        coords = np.array([(src - 1) / 2.0])
    else:
        coords = np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))
    lo = np.clip(np.floor(coords).astype(np.int64), 0, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    return lo, hi, frac


def resample_trilinear(vol: Volume, target: Sequence[int]) -> Volume:
    """Align-corners trilinear resampling to ``target`` = (H', W', D')."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 for t in target):
        raise ShapeError(f"invalid target shape {target}")
    if target == vol.shape:
        return replace(vol, data=vol.data.copy())
    out = vol.data.astype(np.float64)
    for axis, (src, dst) in enumerate(zip(vol.shape, target)):
        if src == dst:
            continue
        lo, hi, frac = _axis_weights(src, dst)
        shape = [1, 1, 1]
        shape[axis] = dst
        frac = frac.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1.0 - frac) + np.take(out, hi, axis=axis) * frac
    scale = [s / t for s, t in zip(vol.shape, target)]
    vox = tuple(v * s for v, s in zip(vol.voxel_size_mm, scale))
    return Volume(data=out.astype(np.float32), voxel_size_mm=vox, intensity_unit=vol.intensity_unit)


def preprocess(vol: Volume, grid: Sequence[int] = (96, 96, 96), threshold: float = 0.0) -> Volume:
    """Crop, resample and normalize a raw CBF map; normalized inputs are only resampled."""
    if vol.intensity_unit == RAW_CBF:
        vol = crop_bounding_box(vol, threshold)
        vol = resample_trilinear(vol, grid)
        return normalize_cbf(vol)
    if vol.shape != tuple(grid):
        vol = resample_trilinear(vol, grid)
    return vol


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

LESION_AMPLITUDE = 0.25


@dataclass
class PhantomSpec:
    """Parameters of one synthetic perfusion phantom.

    A quality phantom is marked by ``quality_score``; its noise level must be
    consistent with the score (see :meth:`for_quality`).
    """

    grid: Tuple[int, int, int] = (96, 96, 96)
    class_id: Optional[int] = None
    quality_score: Optional[float] = None
    noise_sigma: float = 0.0
    lesion_center: Optional[Tuple[float, float, float]] = None
    lesion_radius: float = 0.0
    seed: int = 0

    @classmethod
    def for_quality(cls, score: float, **kw) -> "PhantomSpec":
        if not 0 < score <= 1:
            raise ValueError("quality score must lie in (0, 1]")
        return cls(quality_score=score, noise_sigma=(1.0 / score - 1.0) / 10.0, **kw)

    def validate(self) -> None:
        if len(self.grid) != 3 or any(int(g) < 1 for g in self.grid):
            raise ShapeError(f"invalid phantom grid {self.grid}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.class_id is not None and self.quality_score is not None:
            raise ValueError("a phantom is either classification or quality, not both")
        if self.class_id not in (None, 0, 1):
            raise ValueError(f"class_id must be 0 or 1, got {self.class_id}")
        if self.quality_score is not None:
            if abs(quality_from_noise(self.noise_sigma) - self.quality_score) > 1e-9:
                raise ValueError("quality_score inconsistent with noise_sigma")
        if self.class_id == 1:
            if self.lesion_center is None or self.lesion_radius <= 0:
                raise LesionOutsideGridError("class 1 phantom needs a lesion centre and radius")
            for c, g in zip(self.lesion_center, self.grid):
                if c - self.lesion_radius < 0 or c + self.lesion_radius > g - 1:
                    raise LesionOutsideGridError(
                        f"lesion centre {self.lesion_center} radius {self.lesion_radius} leaves grid {self.grid}"
                    )


def quality_from_noise(noise_sigma: float) -> float:
    return float(min(max(1.0 / (1.0 + 10.0 * noise_sigma), 0.0), 1.0))


def _brain(grid, rng):
    H, W, D = grid
    ii, jj, kk = np.meshgrid(
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        np.arange(D, dtype=np.float64),
        indexing="ij",
    )
    center = np.array([(H - 1) / 2, (W - 1) / 2, (D - 1) / 2]) + rng.uniform(-0.01, 0.01, 3) * np.array(grid)
    axes = 0.42 * np.array(grid, dtype=np.float64) * rng.uniform(0.97, 1.03, 3)
    r2 = ((ii - center[0]) / axes[0]) ** 2 + ((jj - center[1]) / axes[1]) ** 2 + ((kk - center[2]) / axes[2]) ** 2
    r = np.sqrt(r2)
    peak = rng.uniform(0.77, 0.8)
    profile = peak - (peak - 0.3) * np.minimum(r, 1.0) ** 2
    # smooth skull edge: 1 inside, 0 outside, C1 ramp over r in [0.9, 1.0]
    t = np.clip((1.0 - r) / 0.1, 0.0, 1.0)
    edge = t * t * (3 - 2 * t)
    return profile * edge, (ii, jj, kk)


def lesion_blob(grid, center, radius, coords=None) -> np.ndarray:
    """Smooth plateau of height 1 at ``center``, exactly zero beyond ``radius``.

    Flat over the inner 70% of the radius, smoothstep falloff to the rim.
    """
    if coords is None:
        coords = np.meshgrid(*(np.arange(g, dtype=np.float64) for g in grid), indexing="ij")
    dist = np.sqrt(sum((c - float(x)) ** 2 for c, x in zip(coords, center)))
    t = np.clip((float(radius) - dist) / (0.3 * float(radius)), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def default_lesion(grid) -> Tuple[Tuple[float, float, float], float]:
    """Fixed lesion site used by the synthetic classification task."""
    H, W, D = grid
    return (H / 3.0, W / 2.0, D / 2.0), H / 4.0


def generate_phantom(spec: PhantomSpec):
    """Return ``(volume, target)`` where target is the class id, the quality score or None."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base, coords = _brain(tuple(int(g) for g in spec.grid), rng)
    noise = rng.normal(0.0, 1.0, size=base.shape) * spec.noise_sigma if spec.noise_sigma > 0 else 0.0
    field_ = base
    if spec.class_id == 1:
        field_ = base - LESION_AMPLITUDE * lesion_blob(spec.grid, spec.lesion_center, spec.lesion_radius, coords)
    data = np.clip(field_ + noise, 0.0, 1.0).astype(np.float32)
    vol = Volume(data=data, voxel_size_mm=(2.0, 2.0, 2.0), intensity_unit=NORMALIZED)
    if spec.quality_score is not None:
        return vol, quality_from_noise(spec.noise_sigma)
    return vol, spec.class_id
