"""Command-line entry point: pretrain | probe | finetune | sweep | embed.

Every command reads an optional `key = value` config file, applies flag
overrides on top, writes `run.json` (the effective config, its hash, seeds,
and run modes) into the output directory before doing any heavy work, and
exits 0 only if all requested artifacts were written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import subprocess
import sys
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import TABLE_RATIOS, RunConfig, config_hash, load_config
from .datasets import build_dataset
from .evaluation import extract_features, fine_tune, probe_train
from .patching import sample_mask, unpatchify_batch
from .training import load_model, pretrain

SWEEP_HEADER = "ratio,probe_acc,probe_auc,ft_acc,ft_auc"


def _git_revision() -> str | None:
    try:
        return subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, check=True
        ).stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        return None


def write_run_json(out_dir: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "git_revision": _git_revision(),
        "loss_mode": cfg.loss_on,
        "target_norm": cfg.target_norm,
        "pooling": cfg.encoder.pooling,
    }
    payload.update(extra or {})
    path = out_dir / "run.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "mask_ratio", None) is not None:
        out["mask_ratio"] = args.mask_ratio
    if getattr(args, "epochs", None) is not None:
        out["epochs"] = args.epochs
    if getattr(args, "lambda2", None) is not None:
        out["lambda2"] = args.lambda2
    return out


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    write_run_json(out, "pretrain", cfg)
    dataset = build_dataset(cfg.data)
    dataset.save_manifest(out / "manifest.csv")
    result = pretrain(cfg, dataset, out_dir=out)
    if args.dump_recon:
        _dump_reconstructions(out / "recon", result, dataset)
    print(f"pretrain done: {result.checkpoint_path}")
    return 0


def cmd_probe(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    write_run_json(out, "probe", cfg, {"checkpoint": args.checkpoint,
                                       "fraction": args.fraction})
    dataset = build_dataset(cfg.data)
    result = probe_train(args.checkpoint, dataset, fraction=args.fraction,
                         seed=cfg.seed, cfg=cfg.probe)
    subset = result.subset_indices
    lines = ["id,label"]
    lines += [f"{dataset.ids[i]},{dataset.labels[i]}" for i in subset]
    (out / "probe_subset.csv").write_text("\n".join(lines) + "\n")

    counts = {int(c): int(n) for c, n in
              zip(*np.unique(dataset.labels[subset], return_counts=True))}
    report = result.report
    report.provenance.update({
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": file_sha256(args.checkpoint),
        "subsample_counts": counts,
        "probe_epochs": result.epochs_trained,
    })
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"probe: acc {report.accuracy:.2f}% auc {report.auc:.2f}%")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    write_run_json(out, "finetune", cfg, {"checkpoint": args.checkpoint,
                                          "fraction": args.fraction})
    dataset = build_dataset(cfg.data)
    result = fine_tune(args.checkpoint, dataset, cfg=cfg.finetune,
                       probe_cfg=cfg.probe, fraction=args.fraction, seed=cfg.seed)
    report = result.report
    report.provenance.update({
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": file_sha256(args.checkpoint),
    })
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")

    tensors, meta = load_checkpoint(args.checkpoint)
    for name, p in result.encoder.named_parameters():
        tensors[f"model/encoder.{name}"] = p.detach().numpy().copy()
    for name, p in result.head.named_parameters():
        tensors[f"head/{name}"] = p.detach().numpy().copy()
    meta = dict(meta, kind="gcmae-finetune", finetune_epochs=cfg.finetune.epochs)
    save_checkpoint(out / "checkpoint-finetuned.gcmk", tensors, meta)
    print(f"finetune: acc {report.accuracy:.2f}% auc {report.auc:.2f}%")
    return 0


def cmd_embed(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    write_run_json(out, "embed", cfg, {"checkpoint": args.checkpoint})
    dataset = build_dataset(cfg.data)
    model, ckpt_cfg, meta = load_model(args.checkpoint)
    stats = (np.array(meta["stats"]["mean"], dtype=np.float32),
             np.array(meta["stats"]["std"], dtype=np.float32))
    features = extract_features(model.encoder, dataset.pixels, stats)
    dim = features.shape[1]
    lines = ["id,label," + ",".join(f"f{j}" for j in range(dim))]
    for i in range(len(dataset.ids)):
        values = ",".join(repr(float(v)) for v in features[i])
        lines.append(f"{dataset.ids[i]},{dataset.labels[i]},{values}")
    (out / "embeddings.csv").write_text("\n".join(lines) + "\n")
    print(f"embed: wrote {len(dataset.ids)} rows of dim {dim}")
    return 0


def _sweep_one(payload) -> str:
    cfg_dict, ratio, out_dir = payload
    try:
        cfg = _config_from_dict(cfg_dict)
        cfg = dataclasses.replace(cfg, mask_ratio=ratio)
        out = Path(out_dir)
        dataset = build_dataset(cfg.data)
        result = pretrain(cfg, dataset, out_dir=out)
        probe = probe_train(result.checkpoint_path, dataset, fraction=1.0,
                            seed=cfg.seed, cfg=cfg.probe)
        tuned = fine_tune(result.checkpoint_path, dataset, cfg=cfg.finetune,
                          probe_cfg=cfg.probe, seed=cfg.seed)
        return (f"{ratio:g},{probe.report.accuracy:.4f},{probe.report.auc:.4f},"
                f"{tuned.report.accuracy:.4f},{tuned.report.auc:.4f}")
    except Exception as exc:  # noqa: BLE001 - marker row, table must flush
        return f"{ratio:g},FAILED,FAILED,FAILED,FAILED  # {type(exc).__name__}"


def _config_from_dict(cfg_dict: dict) -> RunConfig:
    from .config import DatasetSpec, FineTuneConfig, ProbeConfig
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig

    raw = dict(cfg_dict)
    raw["encoder"] = EncoderConfig(**raw["encoder"])
    raw["decoder"] = DecoderConfig(**raw["decoder"])
    raw["data"] = DatasetSpec(**raw["data"])
    raw["probe"] = ProbeConfig(**raw["probe"])
    raw["finetune"] = FineTuneConfig(**raw["finetune"])
    return RunConfig(**raw)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    ratios = args.ratios if args.ratios else list(TABLE_RATIOS)
    out = Path(args.out)
    write_run_json(out, "sweep", cfg, {"ratios": ratios, "jobs": args.jobs})

    jobs = [(cfg.to_dict(), r, str(out / f"ratio-{r:g}")) for r in ratios]
    csv_path = out / "sweep.csv"
    ok = True
    with open(csv_path, "w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        if args.jobs > 1:
            with multiprocessing.get_context("spawn").Pool(args.jobs) as pool:
                rows = pool.map(_sweep_one, jobs)
        else:
            rows = map(_sweep_one, jobs)
        for row in rows:
            fh.write(row + "\n")
            fh.flush()
            if "FAILED" in row:
                ok = False
    print(f"sweep: wrote {csv_path}")
    return 0 if ok else 1


def _dump_reconstructions(out_dir: Path, result, dataset, n_tiles: int = 4) -> None:
    """PNG triptychs (original | masked | reconstructed) for a few train tiles."""
    import torch
    from PIL import Image

    from .patching import normalize_target_batch, patchify_batch

    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    model = result.model
    model.eval()
    mean, std = result.stats
    p = cfg.encoder.patch_size
    train_idx = dataset.indices("train")[:n_tiles]
    tiles = dataset.pixels[train_idx]
    h, w, c = tiles.shape[1:]
    grid = (h // p, w // p)
    n_patches = grid[0] * grid[1]
    patch_dim = p * p * c

    with torch.no_grad():
        for row, i in enumerate(train_idx):
            raw = tiles[row:row + 1]
            plan = sample_mask(n_patches, cfg.mask_ratio, seed=cfg.seed + int(i))
            patches = torch.from_numpy(
                patchify_batch((raw - mean) / std, p).astype(cfg.dtype, copy=False))
            visible = torch.from_numpy(plan.visible)
            latents = model.encoder(patches[:, plan.visible], visible)
            recon = model.decoder(latents, visible).numpy()

            if cfg.target_norm == "dataset":
                recon_img = unpatchify_batch(recon, grid, p, c)[0] * std + mean
            else:
                raw_patches = patchify_batch(raw, p)
                mu = raw_patches.mean(axis=2, keepdims=True)
                sigma = raw_patches.std(axis=2, keepdims=True)
                recon_img = unpatchify_batch(recon * (sigma + 1e-6) + mu, grid, p, c)[0]

            masked_img = raw[0].copy().reshape(grid[0], p, grid[1], p, c)
            for idx in plan.masked:
                masked_img[idx // grid[1], :, idx % grid[1], :, :] = 0.5
            masked_img = masked_img.reshape(h, w, c)

            strip = np.concatenate([raw[0], masked_img, recon_img], axis=1)
            strip = (np.clip(strip, 0.0, 1.0) * 255).astype(np.uint8)
            Image.fromarray(strip.squeeze()).save(out_dir / f"recon-{int(i):05d}.png")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcmae",
        description="masked-patch reconstruction + memory-bank contrastive pretraining",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mask-ratio", type=float, default=None, dest="mask_ratio")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lambda2", type=float, default=None,
                       help="contrastive weight; 0 reproduces a plain masked autoencoder")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(p)
    p.add_argument("--dump-recon", action="store_true", dest="dump_recon",
                   help="write original/masked/reconstructed PNG triptychs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on a frozen checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--fraction", type=float, default=1.0,
                   help="stratified fraction of training labels to use")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="fine-tune encoder + classifier head")
    common(p, checkpoint=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="pretrain/probe/finetune per mask ratio")
    common(p)
    p.add_argument("--ratios", type=lambda s: [float(x) for x in s.split(",")],
                   default=None, help="comma-separated mask ratios")
    p.add_argument("--jobs", type=int, default=1, help="parallel ratio processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("embed", help="export pooled features as CSV")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_embed)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
