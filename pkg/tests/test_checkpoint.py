import json
import struct

import numpy as np
import pytest
import torch

from perfmae.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, tensor_hash
from perfmae.decoder import plans_to_index
from perfmae.errors import CheckpointError, CheckpointVersionError, PayloadLengthError
from perfmae.patches import sample_mask
from perfmae.train import model_checkpoint, model_from_checkpoint


def _ckpt(rng):
    return Checkpoint(meta={"step": 3, "note": "x"},
                      tensors={"a": rng.random((2, 3)).astype(np.float32), "b": rng.random(4), "c": np.zeros((0, 2))})


def test_roundtrip(tmp_path, rng):
    ck = _ckpt(rng)
    save_checkpoint(ck, tmp_path / "c.ichk")
    back = load_checkpoint(tmp_path / "c.ichk")
    assert back.meta == ck.meta
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    assert tensor_hash(back.tensors) == tensor_hash(ck.tensors)


def test_encoding_is_stable(rng):
    ck = _ckpt(rng)
    assert encode_checkpoint(ck) == encode_checkpoint(Checkpoint(dict(ck.meta), dict(reversed(list(ck.tensors.items())))))


def _rewrite(buf, edit):
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    manifest = json.loads(buf[16:16 + hlen])
    edit(manifest)
    header = json.dumps(manifest).encode()
    return buf[:8] + struct.pack("<Q", len(header)) + header + buf[16 + hlen:]


def test_error_paths(rng):
    buf = encode_checkpoint(_ckpt(rng))
    with pytest.raises(PayloadLengthError):
        decode_checkpoint(buf[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + buf[4:])

    def overlap(m):
        m["tensors"]["b"]["byte_offset"] = 8
    with pytest.raises(CheckpointError, match="overlaps"):
        decode_checkpoint(_rewrite(buf, overlap))

    def version(m):
        m["format_version"] = 99
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(_rewrite(buf, version))

    def badlen(m):
        m["tensors"]["a"]["byte_len"] = 4
    with pytest.raises(CheckpointError):
        decode_checkpoint(_rewrite(buf, badlen))


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode_checkpoint(Checkpoint(tensors={"i": np.arange(3)}))


def test_model_save_load_forward_bit_identical(tmp_path, tiny_mae):
    save_checkpoint(model_checkpoint(tiny_mae), tmp_path / "m.ichk")
    back = model_from_checkpoint(load_checkpoint(tmp_path / "m.ichk"))
    x = torch.rand(2, 8, 1728)
    visible, _ = plans_to_index([sample_mask(8, 0.5, np.random.default_rng(s)) for s in range(2)])
    with torch.no_grad():
        assert torch.equal(tiny_mae(x, visible), back(x, visible))
