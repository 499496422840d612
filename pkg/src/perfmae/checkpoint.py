"""ICHK checkpoint container.

Layout: 8-byte magic ``ICHK0001``, u64 little-endian manifest length, UTF-8
JSON manifest, then the raw little-endian tensor payload. The manifest's
``tensors`` directory maps name -> {dtype, shape, byte_offset, byte_len} with
offsets relative to the payload start.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError, PayloadLengthError

MAGIC = b"ICHK0001"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    meta: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "f32"
    if a.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {a.dtype}")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = _as_numpy(ckpt.tensors[name])
        tag = _dtype_tag(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        directory[name] = {"dtype": tag, "shape": list(arr.shape), "byte_offset": offset, "byte_len": len(blob)}
        chunks.append(blob)
        offset += len(blob)
    manifest = dict(ckpt.meta)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = directory
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad checkpoint magic {buf[:8]!r}")
    if len(buf) < 16:
        raise CheckpointError(f"{source}: truncated header")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    if 16 + hlen > len(buf):
        raise CheckpointError(f"{source}: manifest length exceeds file size")
    try:
        manifest = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{source}: malformed manifest ({exc})") from exc
    version = manifest.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format_version {version}, expected {FORMAT_VERSION}")
    directory = manifest.pop("tensors", None)
    if not isinstance(directory, dict):
        raise CheckpointError(f"{source}: manifest has no tensor directory")

    payload = memoryview(buf)[16 + hlen :]
    entries = sorted(directory.items(), key=lambda kv: kv[1]["byte_offset"])
    cursor = 0
    total = 0
    tensors = {}
    for name, ent in entries:
        try:
            dtype = _DTYPES[ent["dtype"]]
            shape = tuple(int(s) for s in ent["shape"])
            off, blen = int(ent["byte_offset"]), int(ent["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{source}: bad directory entry for {name!r}") from exc
        if off < cursor:
            raise CheckpointError(f"{source}: tensor {name!r} overlaps the previous tensor")
        if blen != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{source}: tensor {name!r} byte_len does not match its shape")
        if off + blen > len(payload):
            raise PayloadLengthError(f"{source}: payload truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(payload[off : off + blen], dtype=dtype).reshape(shape).copy()
        cursor = off + blen
        total += blen
    if len(payload) != total:
        raise PayloadLengthError(f"{source}: payload is {len(payload)} bytes, directory accounts for {total}")
    return Checkpoint(meta=manifest, tensors=tensors)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def tensor_hash(tensors: Mapping[str, Any]) -> str:
    """SHA-256 over names, dtypes, shapes and bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_as_numpy(tensors[name]))
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def as_torch(t) -> torch.Tensor:
    """Owned torch copy of a checkpoint tensor (numpy array or tensor)."""
    return torch.from_numpy(np.array(_as_numpy(t)))
