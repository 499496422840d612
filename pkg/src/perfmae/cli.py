"""Command-line entry point: synth, pretrain, finetune, evaluate, reconstruct, sweep.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import config as C
from .checkpoint import load_checkpoint, save_checkpoint
from .cv import render_table, run_nested_cv, stratified_split, strata_for_regression
from .decoder import build_mae, masked_input, plans_to_index, stitch_reconstruction
from .errors import ConfigError, DataError, PerfMAEError
from .lora import BINARY, adapter_checkpoint, run_finetune
from .metrics import CLASSIFICATION_KEYS, REGRESSION_KEYS
from .patches import patchify_array, sample_mask
from .train import configs_from_meta, load_dataset, model_from_checkpoint, run_pretraining
from .volume import PhantomSpec, default_lesion, generate_phantom, load_volume, quality_from_noise, preprocess, write_ivol, write_nifti

log = logging.getLogger("perfmae")


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _phantom_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = tuple(args.grid)
    center, radius = default_lesion(grid)
    noise_rng = np.random.default_rng([args.seed, 7])
    records = []
    for i in range(args.n):
        seed = _phantom_seed(args.seed, i)
        rec = {"path": f"phantom_{i:04d}.ivol"}
        if args.kind == "quality":
            sigma = float(noise_rng.uniform(0.0, args.noise))
            spec = PhantomSpec(grid=grid, noise_sigma=sigma, quality_score=quality_from_noise(sigma), seed=seed)
            vol, score = generate_phantom(spec)
            rec.update(study_id="synth", score=score)
        else:
            cls = i % 2
            spec = PhantomSpec(grid=grid, class_id=cls, noise_sigma=args.noise, seed=seed,
                               lesion_center=center if cls else None, lesion_radius=radius if cls else 0.0)
            vol, label = generate_phantom(spec)
            if args.kind == "class":
                rec.update(study_id="synth", label=int(label))
            else:
                # unequal study sizes (1/4, 1/4, 1/2) so balanced sampling has something to do
                rec.update(study_id=f"study{min(4 * i // args.n, 2)}")
        write_ivol(vol, out / rec["path"])
        records.append(rec)
    C.write_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} phantoms and {out / 'manifest.jsonl'}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def _pretrain(cfg: dict, out_dir: Path, rho: Optional[float] = None):
    manifest = C.require(cfg, "data.manifest_path")
    records = C.read_manifest(manifest)
    for r in records:
        if "label" in r or "score" in r:
            raise DataError(f"{r['path']}: pretraining manifests carry neither label nor score")
    enc_cfg, dec_cfg = C.model_configs(cfg)
    plan = C.pretrain_plan(cfg)
    if rho is not None:
        plan.rho = rho
    volumes = load_dataset(records, enc_cfg.volume_shape, cfg["data"]["crop_threshold"], cfg["data"]["format"])
    return run_pretraining(volumes, [r["study_id"] for r in records], enc_cfg, dec_cfg, plan, out_dir,
                           paths=[r["path"] for r in records])


def cmd_pretrain(args) -> int:
    cfg = C.load_config(args.config) if args.config else C.resolve_config({})
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    out = Path(args.out)
    result = _pretrain(cfg, out)
    _write_json(cfg, out / "config.json")
    print(f"pretrained {len(result.step_losses)} steps; checkpoint {out / 'checkpoint.ichk'}")
    return 0


# ---------------------------------------------------------------------------
# downstream
# ---------------------------------------------------------------------------


def _encoder(cfg: dict, checkpoint: Optional[str], rand_init: bool):
    enc_cfg, dec_cfg = C.model_configs(cfg)
    if rand_init:
        return build_mae(enc_cfg, dec_cfg, cfg["pretrain"]["seed"]).encoder, {
            "model": {"encoder": enc_cfg.to_dict(), "decoder": dec_cfg.to_dict()}
        }
    if not checkpoint:
        raise ConfigError("--checkpoint is required unless --rand-init is given")
    ckpt = load_checkpoint(checkpoint)
    ck_enc, _ = configs_from_meta(ckpt.meta)
    if tuple(ck_enc.volume_shape) != tuple(enc_cfg.volume_shape):
        raise ConfigError(
            f"checkpoint volume shape {ck_enc.volume_shape} does not match data.grid {enc_cfg.volume_shape}"
        )
    return model_from_checkpoint(ckpt).encoder, ckpt.meta


def _task_data(cfg: dict, manifest: str, patch_size: int, grid):
    records = C.read_manifest(manifest)
    kind, targets = C.task_targets(records)
    volumes = load_dataset(records, grid, cfg["data"]["crop_threshold"], cfg["data"]["format"])
    return kind, np.asarray(targets, dtype=np.float64), torch.from_numpy(patchify_array(volumes, patch_size))


def cmd_finetune(args) -> int:
    cfg = C.load_config(args.config) if args.config else C.resolve_config({})
    encoder, base_meta = _encoder(cfg, args.checkpoint, args.rand_init)
    kind, targets, patches = _task_data(cfg, args.task_manifest, encoder.cfg.patch_size, encoder.cfg.volume_shape)
    strata = targets.astype(int) if kind == BINARY else strata_for_regression(targets)
    train, val = stratified_split(np.arange(len(targets)), strata, 0.2, np.random.default_rng([cfg["eval"]["seed"], 3]))
    spec, hyper = C.lora_spec(cfg), C.finetune_hyper(cfg)
    result = run_finetune(encoder, patches[torch.from_numpy(train)], targets[train],
                          patches[torch.from_numpy(val)], targets[val], kind, spec, hyper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(adapter_checkpoint(result, spec, hyper, base_meta, embed_base=args.rand_init), out / "adapter.ichk")
    _write_json({"history": result.history, "best_epoch": result.best_epoch, "best_val_metric": result.best_metric,
                 "train": train.tolist(), "val": val.tolist()}, out / "finetune.json")
    print(f"best epoch {result.best_epoch}, validation metric {result.best_metric:.4f}")
    return 0


def _evaluate(cfg: dict, encoder, manifest: str, task_name: str, out: Path) -> dict:
    kind, targets, patches = _task_data(cfg, manifest, encoder.cfg.patch_size, encoder.cfg.volume_shape)
    report = run_nested_cv(patches, targets, kind, encoder, C.lora_spec(cfg), C.finetune_hyper(cfg),
                           k=int(cfg["eval"]["k"]), seed=int(cfg["eval"]["seed"]), task_name=task_name, config=cfg)
    out.mkdir(parents=True, exist_ok=True)
    audit = report.pop("audit")
    _write_json(report, out / "report.json")
    _write_json(audit, out / "fold_audit.json")
    keys = CLASSIFICATION_KEYS if kind == BINARY else REGRESSION_KEYS
    rows = {f"fold {f['fold']}": f["metrics"] for f in report["folds"]}
    rows["mean"] = report["mean"]
    (out / "report.txt").write_text(render_table(rows, keys))
    return report


def cmd_evaluate(args) -> int:
    cfg = C.load_config(args.config) if args.config else C.resolve_config({})
    encoder, _ = _encoder(cfg, args.checkpoint, args.rand_init)
    name = "rand" if args.rand_init else Path(args.task_manifest).stem
    report = _evaluate(cfg, encoder, args.task_manifest, name, Path(args.out))
    print(json.dumps(report["mean"], sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt).eval()
    enc_cfg = model.enc_cfg
    vol = preprocess(load_volume(args.volume), enc_cfg.volume_shape)
    P = enc_cfg.patch_size
    plan = sample_mask(enc_cfg.grid.n_patches, args.rho, np.random.default_rng(args.seed))
    dtype = next(model.parameters()).dtype
    patches = torch.from_numpy(patchify_array(vol.data, P)).to(dtype).unsqueeze(0)
    visible, _ = plans_to_index([plan])
    with torch.no_grad():
        pred = model(patches, visible)[0].numpy()
    target = patchify_array(vol.data, P)
    masked_mse = None
    if len(plan.masked):
        diff = pred[plan.masked].astype(np.float64) - target[plan.masked]
        masked_mse = float(np.sum(diff * diff) / len(plan.masked))
    recon = stitch_reconstruction(vol, pred, plan, P)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ivol(vol, out / "input.ivol")
    write_ivol(masked_input(vol, plan, P), out / "masked_input.ivol")
    write_ivol(recon, out / "reconstruction.ivol")
    if args.nifti:
        write_nifti(recon, out / "reconstruction.nii.gz")
    _write_json({"rho": args.rho, "seed": args.seed, "n_masked": int(len(plan.masked)),
                 "masked": plan.masked.tolist(), "masked_mse": masked_mse}, out / "reconstruction.json")
    print(f"masked MSE {masked_mse}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    cfg = C.load_config(args.config)
    rhos = [float(r) for r in args.rhos.split(",") if r.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, table_rows = [], {}
    keys = None
    for rho in rhos:
        sub = out / f"rho_{rho:g}"
        pre = _pretrain(cfg, sub, rho=rho)
        report = _evaluate(cfg, pre.model.encoder, args.task_manifest, f"rho={rho:g}", sub / "eval")
        keys = CLASSIFICATION_KEYS if report["task_kind"] == BINARY else REGRESSION_KEYS
        rows.append({"rho": rho, "pretrain_steps": len(pre.step_losses),
                     "final_pretrain_loss": pre.step_losses[-1] if pre.step_losses else None,
                     "mean": report["mean"]})
        table_rows[f"rho={rho:g}"] = report["mean"]
        log.info("rho %.2f: %d pretraining steps, mean %s", rho, len(pre.step_losses), report["mean"])
    _write_json({"rows": rows, "config": cfg}, out / "sweep.json")
    (out / "sweep.txt").write_text(render_table(table_rows, keys))
    print(render_table(table_rows, keys))
    return 0


# ---------------------------------------------------------------------------


def _grid(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("grid must be H,W,D")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perfmae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic phantoms and a manifest")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--kind", choices=("class", "quality", "unlabeled"), default="class")
    s.add_argument("--noise", type=float, default=0.05, help="noise std (class/unlabeled) or max std (quality)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=_grid, default=[48, 48, 48])
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    s.add_argument("--config")
    s.add_argument("--out", default="pretrain_out")
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    s.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "single train/val LoRA fit"),
                                 ("evaluate", cmd_evaluate, "nested cross-validation")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--checkpoint")
        s.add_argument("--task-manifest", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--rand-init", action="store_true", help="randomly initialized frozen base")
        s.set_defaults(func=func)

    s = sub.add_parser("reconstruct", help="masked reconstruction of one volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--nifti", action="store_true", help="also write the reconstruction as NIfTI")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sweep", help="masking-ratio sweep: pretrain + evaluate per ratio")
    s.add_argument("--config", required=True)
    s.add_argument("--rhos", default="0.25,0.5,0.75")
    s.add_argument("--task-manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    threads = os.environ.get("ICHOR_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except PerfMAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
