import json

import pytest

from perfmae.config import (
    DEFAULTS,
    finetune_hyper,
    load_config,
    lora_spec,
    model_configs,
    pretrain_plan,
    read_manifest,
    require,
    resolve_config,
    task_targets,
    write_manifest,
)
from perfmae.errors import ConfigError, DataError
from perfmae.lora import BINARY, REGRESSION


def test_golden_defaults():
    cfg = resolve_config({})
    p, f, l = pretrain_plan(cfg), finetune_hyper(cfg), lora_spec(cfg)
    assert (p.rho, p.epochs, p.warmup_epochs, p.base_lr, p.batch_size, p.weight_decay, p.alpha_bal) == (
        0.5, 400, 40, 1.5e-4, 48, 0.05, 0.5)
    assert (p.beta1, p.beta2) == (0.9, 0.95)
    assert (f.epochs, f.warmup_epochs, f.base_lr, f.batch_size) == (100, 10, 5e-4, 8)
    assert (l.r, l.alpha, l.dropout) == (8, 16.0, 0.2)
    assert cfg["eval"]["k"] == 5
    enc, dec = model_configs(cfg)
    assert (enc.embed_dim, enc.n_blocks, enc.n_heads, enc.mlp_dim, enc.patch_size, enc.volume_shape) == (
        768, 12, 12, 3072, 12, (96, 96, 96))
    assert (dec.dec_dim, dec.n_blocks, dec.n_heads, dec.mlp_dim) == (384, 4, 12, 1536)


def test_unknown_keys_all_listed():
    with pytest.raises(ConfigError) as info:
        resolve_config({"zzz": 1, "pretrain": {"epoch": 3, "rho": 0.5}, "finetune": {"lora": {"rank": 2}}})
    msg = str(info.value)
    assert "zzz" in msg and "pretrain.epoch" in msg and "finetune.lora.rank" in msg


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        resolve_config({"pretrain": {"rho": 1.5}})
    with pytest.raises(ConfigError):
        resolve_config({"model": {"embed_dim": 30}})


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"eval": {"k": 3}}))
    assert load_config(p)["eval"]["k"] == 3
    assert DEFAULTS["eval"]["k"] == 5


def test_require_names_key():
    with pytest.raises(ConfigError, match="data.manifest_path"):
        require(resolve_config({}), "data.manifest_path")


def test_manifest_roundtrip_and_targets(tmp_path):
    write_manifest([{"path": "a.ivol", "label": 1}, {"path": "/abs/b.ivol", "label": 0}], tmp_path / "m.jsonl")
    recs = read_manifest(tmp_path / "m.jsonl")
    assert recs[0]["path"] == str(tmp_path / "a.ivol") and recs[1]["path"] == "/abs/b.ivol"
    assert recs[0]["study_id"] == "default"
    assert task_targets(recs) == (BINARY, [1, 0])
    assert task_targets([{"path": "x", "score": 0.3}]) == (REGRESSION, [0.3])
    with pytest.raises(DataError):
        task_targets([{"path": "x", "score": 0.3, "label": 1}])
    with pytest.raises(DataError):
        task_targets([{"path": "x", "score": 0.3}, {"path": "y", "label": 1}])
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "e.jsonl")
