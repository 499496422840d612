import json

import numpy as np
import pytest

from perfmae.checkpoint import load_checkpoint
from perfmae.cli import main
from perfmae.config import read_manifest
from perfmae.patches import patchify_array
from perfmae.volume import load_ivol

TINY = {
    "model": {"embed_dim": 24, "n_blocks": 1, "n_heads": 2, "mlp_dim": 48, "patch_size": 12,
              "dec_dim": 12, "dec_blocks": 1, "dec_heads": 2, "dec_mlp_dim": 24},
    "pretrain": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4},
    "finetune": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4},
    "data": {"grid": [24, 24, 24]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "8", "--kind", "unlabeled", "--grid", "24,24,24", "--out-dir", str(root / "un")]) == 0
    assert main(["synth", "--n", "20", "--kind", "class", "--grid", "24,24,24", "--out-dir", str(root / "cls")]) == 0
    cfg = json.loads(json.dumps(TINY))
    cfg["data"]["manifest_path"] = str(root / "un/manifest.jsonl")
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(root / "cfg.json"), "--out", str(root / "pre")]) == 0
    return root


def test_synth_manifest(workspace, tmp_path):
    recs = read_manifest(workspace / "cls/manifest.jsonl")
    assert len(recs) == 20 and sum(r["label"] for r in recs) == 10
    assert all("label" not in r and "score" not in r for r in read_manifest(workspace / "un/manifest.jsonl"))
    main(["synth", "--n", "20", "--kind", "class", "--grid", "24,24,24", "--out-dir", str(tmp_path / "again")])
    for i in (0, 7):
        name = f"phantom_{i:04d}.ivol"
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "cls" / name).read_bytes()


def test_synth_quality(tmp_path):
    assert main(["synth", "--n", "6", "--kind", "quality", "--noise", "0.2", "--grid", "24,24,24",
                 "--out-dir", str(tmp_path)]) == 0
    scores = [r["score"] for r in read_manifest(tmp_path / "manifest.jsonl")]
    assert all(1 / 3 <= s <= 1 for s in scores)


def test_pretrain_checkpoint_reloads(workspace):
    ck = load_checkpoint(workspace / "pre/checkpoint.ichk")
    assert ck.meta["stage"] == "pretrain" and ck.meta["step"] == 4


def test_pretrain_dry_run(capsys):
    assert main(["pretrain", "--dry-run"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["pretrain"]["epochs"] == 400 and cfg["finetune"]["lora"]["r"] == 8


def test_pretrain_missing_manifest(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "data.manifest_path" in capsys.readouterr().err


def test_pretrain_rejects_labelled_manifest(workspace, tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["data"]["manifest_path"] = str(workspace / "cls/manifest.jsonl")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 3


def test_unknown_config_key_exit_code(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    assert main(["pretrain", "--config", str(tmp_path / "c.json")]) == 2


def test_finetune_and_evaluate(workspace, tmp_path):
    args = ["--config", str(workspace / "cfg.json"), "--checkpoint", str(workspace / "pre/checkpoint.ichk"),
            "--task-manifest", str(workspace / "cls/manifest.jsonl")]
    assert main(["finetune", *args, "--out", str(tmp_path / "ft")]) == 0
    assert load_checkpoint(tmp_path / "ft/adapter.ichk").meta["stage"] == "adapter"
    assert main(["evaluate", *args, "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev/report.json").read_text())
    assert len(report["folds"]) == 5 and "auc" in report["mean"]
    audit = json.loads((tmp_path / "ev/fold_audit.json").read_text())
    assert all(r["test_disjoint"] for r in audit)
    assert "(Unit: %)" in (tmp_path / "ev/report.txt").read_text()


def test_evaluate_rand_init(workspace, tmp_path):
    assert main(["evaluate", "--config", str(workspace / "cfg.json"), "--rand-init",
                 "--task-manifest", str(workspace / "cls/manifest.jsonl"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["task"] == "rand"


def test_evaluate_shape_mismatch(workspace, tmp_path):
    cfg = json.loads((workspace / "cfg.json").read_text())
    cfg["data"]["grid"] = [36, 36, 36]
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["evaluate", "--config", str(tmp_path / "c.json"), "--checkpoint", str(workspace / "pre/checkpoint.ichk"),
                 "--task-manifest", str(workspace / "cls/manifest.jsonl"), "--out", str(tmp_path / "o")]) == 2


def test_reconstruct(workspace, tmp_path):
    ck, vol = str(workspace / "pre/checkpoint.ichk"), str(workspace / "cls/phantom_0001.ivol")
    assert main(["reconstruct", "--checkpoint", ck, "--volume", vol, "--rho", "0", "--out", str(tmp_path / "r0")]) == 0
    assert (tmp_path / "r0/input.ivol").read_bytes() == (tmp_path / "r0/reconstruction.ivol").read_bytes()
    for d in ("a", "b"):
        assert main(["reconstruct", "--checkpoint", ck, "--volume", vol, "--rho", "0.5", "--seed", "3",
                     "--out", str(tmp_path / d)]) == 0
    for name in ("input.ivol", "masked_input.ivol", "reconstruction.ivol", "reconstruction.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    info = json.loads((tmp_path / "a/reconstruction.json").read_text())
    inp = load_ivol(tmp_path / "a/input.ivol").data
    masked = load_ivol(tmp_path / "a/masked_input.ivol").data
    assert info["n_masked"] == 4 and info["masked_mse"] > 0
    mp, ip = patchify_array(masked, 12), patchify_array(inp, 12)
    assert not mp[info["masked"]].any()
    visible = np.setdiff1d(np.arange(8), info["masked"])
    np.testing.assert_array_equal(mp[visible], ip[visible])


def test_reconstruct_bad_checkpoint(workspace, tmp_path):
    vol = str(workspace / "cls/phantom_0001.ivol")
    assert main(["reconstruct", "--checkpoint", vol, "--volume", vol, "--out", str(tmp_path)]) == 3


def test_thread_env(workspace, tmp_path, monkeypatch):
    import torch
    before = torch.get_num_threads()
    monkeypatch.setenv("ICHOR_THREADS", "1")
    assert main(["pretrain", "--dry-run"]) == 0
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)
