"""Pretraining loop: masking -> encoder -> {decoder, memory bank} -> joint loss.

Per step: sample a mask plan per tile, encode the visible patches, (a) decode
and take the reconstruction MSE, (b) pool the visible latents into a per-tile
feature, fetch its banked key, draw random negatives and take the InfoNCE
loss; combine with weights (lambda1, lambda2), backprop, apply the optimizer,
and only then mix the new features into the bank.

Randomness is split into named streams (init / mask / order / bank), so runs
are bit-reproducible per seed and disabling the contrastive branch leaves the
reconstruction trajectory untouched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig, config_hash
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import TileDataset
from .decoder import MaskedDecoder, mse_loss
from .encoder import PatchEncoder
from .losses import CSV_HEADER, LossReport, combined_loss, csv_line
from .membank import MemoryBank, info_nce
from .optim import AdamW
from .patching import normalize_target_batch, patchify_batch, sample_mask
from .rng import draw_seed, generator_state, restore_generator, substream
from .transformer import init_parameters

CHECKPOINT_LAST = "checkpoint-last.gcmk"
CHECKPOINT_FINAL = "checkpoint-final.gcmk"
LOSS_CSV = "loss.csv"


class GCMAEModel(nn.Module):
    """Encoder/decoder pair sharing one patch grid."""

    def __init__(self, cfg: RunConfig, n_patches: int, patch_dim: int):
        super().__init__()
        self.encoder = PatchEncoder(cfg.encoder, n_patches, patch_dim)
        self.decoder = MaskedDecoder(cfg.decoder, n_patches, patch_dim, cfg.encoder.dim)


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def build_model(cfg: RunConfig, n_patches: int, patch_dim: int) -> GCMAEModel:
    """Construct and deterministically initialize the model from cfg.seed."""
    model = GCMAEModel(cfg, n_patches, patch_dim).to(torch_dtype(cfg.dtype))
    init_parameters(model, substream(cfg.seed, "init"))
    return model


def lr_at(cfg: RunConfig, step: int, total_steps: int) -> float:
    """Learning rate for a 0-based step: optional linear warmup, then
    constant or cosine decay to zero."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "cosine":
        span = max(1, total_steps - cfg.warmup_steps)
        t = (step - cfg.warmup_steps) / span
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))
    return cfg.lr


@dataclass
class PretrainResult:
    model: GCMAEModel
    bank: MemoryBank | None
    history: list[LossReport]
    config: RunConfig
    stats: tuple[np.ndarray, np.ndarray]
    checkpoint_path: str | None = None
    loss_csv_path: str | None = None


def _batch_plans(n_patches: int, ratio: float, mask_rng, batch: int):
    plans = [sample_mask(n_patches, ratio, draw_seed(mask_rng)) for _ in range(batch)]
    visible = torch.from_numpy(np.stack([p.visible for p in plans]))
    masked = torch.from_numpy(np.stack([p.masked for p in plans]))
    return plans, visible, masked


def pretrain(cfg: RunConfig, dataset: TileDataset, out_dir=None, on_step=None,
             resume_from=None) -> PretrainResult:
    """Run the pretraining loop over the dataset's train split.

    When ``out_dir`` is given, writes loss.csv incrementally, a rolling
    per-epoch checkpoint, and a final checkpoint; on an exception the last
    epoch checkpoint is retained. ``on_step(step, model, report)`` is called
    after every optimizer step.
    """
    from pathlib import Path

    train_idx = dataset.indices("train")
    n_train = len(train_idx)
    if n_train == 0:
        raise ValueError("dataset has no train split")
    if not np.array_equal(dataset.ids[train_idx], np.arange(n_train)):
        raise ValueError("train tile ids must be dense in [0, n_train)")

    tiles = dataset.pixels[train_idx]
    h, w, c = tiles.shape[1:]
    p = cfg.encoder.patch_size
    if h % p or w % p:
        raise ValueError(f"tile size {h}x{w} not divisible by patch size {p}")
    n_patches = (h // p) * (w // p)
    patch_dim = p * p * c
    dtype = torch_dtype(cfg.dtype)
    mean, std = dataset.stats

    batch = min(cfg.batch_size, n_train)
    if cfg.contrastive and cfg.num_negatives > n_train - batch:
        raise ValueError(
            f"num_negatives={cfg.num_negatives} exceeds bank size {n_train} minus "
            f"batch size {batch}; lower num_negatives or the batch size"
        )

    model = build_model(cfg, n_patches, patch_dim)
    opt = AdamW(dict(model.named_parameters()), lr=cfg.lr,
                betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    bank = MemoryBank(n_train, cfg.encoder.dim, cfg.seed, cfg.bank_mixing,
                      dtype=dtype) if cfg.contrastive else None
    mask_rng = substream(cfg.seed, "mask")
    order_rng = substream(cfg.seed, "order")

    start_epoch = 0
    step = 0
    history: list[LossReport] = []
    if resume_from is not None:
        tensors, meta = load_checkpoint(resume_from)
        if meta.get("config_hash") != config_hash(cfg):
            raise ValueError("checkpoint config does not match the current run config")
        _load_model_tensors(model, tensors)
        opt.load_state(tensors, meta["optim"])
        if cfg.contrastive:
            bank = MemoryBank.restore(tensors, meta["bank"])
        mask_rng = restore_generator(meta["rng"]["mask"])
        order_rng = restore_generator(meta["rng"]["order"])
        start_epoch = meta["epoch"] + 1
        step = meta["step"]

    steps_per_epoch = math.ceil(n_train / batch)
    total_steps = cfg.epochs * steps_per_epoch

    csv_path = None
    csv_file = None
    ckpt_last = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / LOSS_CSV
        fresh = resume_from is None or not csv_path.exists()
        csv_file = open(csv_path, "w" if fresh else "a")
        if fresh:
            csv_file.write(CSV_HEADER + "\n")
        ckpt_last = out_dir / CHECKPOINT_LAST

    model.train()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = order_rng.permutation(n_train)
            for lo in range(0, n_train, batch):
                ids = order[lo:lo + batch]
                raw = tiles[ids]
                x_in = (raw - mean) / std
                patches = torch.from_numpy(
                    patchify_batch(x_in, p).astype(cfg.dtype, copy=False))
                target = torch.from_numpy(
                    normalize_target_batch(raw, cfg.target_norm, (mean, std), p)
                    .astype(cfg.dtype, copy=False))
                _, visible, masked = _batch_plans(n_patches, cfg.mask_ratio,
                                                  mask_rng, len(ids))
                vis_patches = torch.gather(
                    patches, 1, visible.unsqueeze(-1).expand(-1, -1, patch_dim))

                latents = model.encoder(vis_patches, visible)
                recon = model.decoder(latents, visible)
                l_mse = mse_loss(recon, target, masked, cfg.loss_on)

                l_nce_value = 0.0
                feature = None
                if cfg.contrastive:
                    keys = bank.keys_for(ids)
                    negatives = bank.sample_negatives(cfg.num_negatives, exclude=ids)
                    if cfg.lambda2 != 0.0:
                        feature = model.encoder.tile_feature(latents)
                        l_nce = info_nce(feature, keys, negatives, cfg.temperature)
                        total = cfg.lambda1 * l_mse + cfg.lambda2 * l_nce
                    else:
                        # still report the contrastive loss, but keep it out of
                        # the graph so the trajectory matches a bank-free run
                        with torch.no_grad():
                            feature = model.encoder.tile_feature(latents)
                            l_nce = info_nce(feature, keys, negatives, cfg.temperature)
                        total = cfg.lambda1 * l_mse
                    l_nce_value = float(l_nce)
                else:
                    total = cfg.lambda1 * l_mse

                opt.zero_grad()
                total.backward()
                opt.step(lr=lr_at(cfg, step, total_steps))
                if cfg.contrastive:
                    bank.momentum_update(ids, feature.detach(), epoch)

                report = combined_loss(float(l_mse), l_nce_value,
                                       cfg.lambda1, cfg.lambda2, step)
                history.append(report)
                if csv_file is not None:
                    csv_file.write(csv_line(report) + "\n")
                    csv_file.flush()
                if on_step is not None:
                    on_step(step, model, report)
                step += 1

            if ckpt_last is not None and (epoch + 1) % cfg.checkpoint_every == 0:
                _save_state(ckpt_last, model, opt, bank, cfg, epoch, step,
                            mask_rng, order_rng, (mean, std), (h, w, c))
    finally:
        if csv_file is not None:
            csv_file.close()

    result = PretrainResult(model=model, bank=bank, history=history, config=cfg,
                            stats=(mean, std),
                            loss_csv_path=str(csv_path) if csv_path else None)
    if out_dir is not None:
        final = Path(out_dir) / CHECKPOINT_FINAL
        _save_state(final, model, opt, bank, cfg, cfg.epochs - 1, step,
                    mask_rng, order_rng, (mean, std), (h, w, c))
        result.checkpoint_path = str(final)
    return result


def _save_state(path, model, opt, bank, cfg, epoch, step, mask_rng, order_rng,
                stats, tile_shape) -> None:
    tensors = {f"model/{k}": v.detach().numpy().copy()
               for k, v in model.named_parameters()}
    tensors.update(opt.state_tensors())
    meta = {
        "kind": "gcmae-pretrain",
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "epoch": epoch,
        "step": step,
        "optim": opt.state_meta(),
        "bank": None,
        "rng": {"mask": generator_state(mask_rng), "order": generator_state(order_rng)},
        "stats": {"mean": [float(x) for x in stats[0]],
                  "std": [float(x) for x in stats[1]]},
        "tile_shape": list(tile_shape),
        "loss_on": cfg.loss_on,
        "target_norm": cfg.target_norm,
        "pooling": cfg.encoder.pooling,
        "mask_ratio": cfg.mask_ratio,
    }
    if bank is not None:
        tensors.update(bank.state_tensors())
        meta["bank"] = bank.state_meta()
    save_checkpoint(path, tensors, meta)


def _load_model_tensors(model: nn.Module, tensors: dict) -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            key = f"model/{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing tensor {key!r}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(param.shape):
                raise ValueError(
                    f"checkpoint tensor {key!r} has shape {arr.shape}, "
                    f"model expects {tuple(param.shape)}")
            param.copy_(torch.from_numpy(arr.copy()).to(param.dtype))


def load_model(path) -> tuple[GCMAEModel, RunConfig, dict]:
    """Rebuild the full model (encoder + decoder) from a checkpoint."""
    from .config import config_from_flat  # noqa: F401  (import cycle guard)

    tensors, meta = load_checkpoint(path)
    cfg = _config_from_meta(meta)
    h, w, c = meta["tile_shape"]
    p = cfg.encoder.patch_size
    model = GCMAEModel(cfg, (h // p) * (w // p), p * p * c).to(torch_dtype(cfg.dtype))
    _load_model_tensors(model, tensors)
    model.eval()
    return model, cfg, meta


def _config_from_meta(meta: dict) -> RunConfig:
    from .config import DatasetSpec, FineTuneConfig, ProbeConfig
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig

    raw = dict(meta["config"])
    raw["encoder"] = EncoderConfig(**raw["encoder"])
    raw["decoder"] = DecoderConfig(**raw["decoder"])
    raw["data"] = DatasetSpec(**raw["data"])
    raw["probe"] = ProbeConfig(**raw["probe"])
    raw["finetune"] = FineTuneConfig(**raw["finetune"])
    return RunConfig(**raw)


# -- gradient verification -------------------------------------------------


def parameter_slices(model: nn.Module) -> list[tuple[str, int, int]]:
    """(name, start, stop) spans of each parameter in the flat vector."""
    spans = []
    offset = 0
    for name, p in model.named_parameters():
        spans.append((name, offset, offset + p.numel()))
        offset += p.numel()
    return spans


def collect_flat(model: nn.Module) -> np.ndarray:
    """Flatten all parameters into one float64 vector."""
    return np.concatenate([
        p.detach().numpy().astype(np.float64).ravel()
        for _, p in model.named_parameters()
    ])


def assign_flat(model: nn.Module, vec: np.ndarray) -> None:
    """Write a flat vector back into the model's parameters."""
    offset = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            n = p.numel()
            chunk = vec[offset:offset + n].reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(np.ascontiguousarray(chunk)).to(p.dtype))
            offset += n
    if offset != len(vec):
        raise ValueError(f"vector length {len(vec)} != parameter count {offset}")


def flat_grad(model: nn.Module) -> np.ndarray:
    """Flatten current ``.grad`` tensors (missing grads count as zero)."""
    parts = []
    for _, p in model.named_parameters():
        g = p.grad
        parts.append((torch.zeros_like(p) if g is None else g)
                     .detach().numpy().astype(np.float64).ravel())
    return np.concatenate(parts)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    eps: float
    n_checked: int
    n_below_atol: int
    non_checkable: list[str] = field(default_factory=list)

    def __str__(self):
        return (f"grad check: max rel err {self.max_rel_err:.3e} at {self.worst} "
                f"(eps={self.eps:g}, {self.n_checked} coords, "
                f"{self.n_below_atol} below atol, {len(self.non_checkable)} kinks)")


def grad_check(fn, x0: np.ndarray, analytic: np.ndarray, eps: float = 1e-5,
               atol: float = 1e-8,
               names: list[tuple[str, int, int]] | None = None) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    ``fn`` maps a float64 parameter vector to a scalar. Coordinates where
    both the analytic and numeric derivative are below ``atol`` pass
    trivially. Coordinates whose one-sided differences disagree strongly are
    flagged as non-checkable kinks (nondifferentiable points) instead of
    being scored.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if x0.shape != analytic.shape:
        raise ValueError("point and analytic gradient must have the same shape")
    if eps < 1e-7:
        warnings.warn(f"eps={eps:g} is below the float64 central-difference noise "
                      "floor; results may be meaningless", stacklevel=2)

    def coord_name(i: int) -> str:
        if names:
            for name, start, stop in names:
                if start <= i < stop:
                    return f"{name}[{i - start}]"
        return f"x[{i}]"

    x = x0.copy()
    f0 = None
    max_rel = 0.0
    worst = "-"
    n_below = 0
    kinks: list[str] = []
    for i in range(len(x0)):
        orig = x[i]
        x[i] = orig + eps
        f_plus = fn(x)
        x[i] = orig - eps
        f_minus = fn(x)
        x[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(numeric - analytic[i])
        if err <= atol:
            n_below += 1
            continue
        rel = err / max(abs(numeric), abs(analytic[i]))
        if rel > 1e-4:
            # disambiguate a kink from a wrong gradient via one-sided slopes
            if f0 is None:
                f0 = fn(x0)
            fwd = (f_plus - f0) / eps
            bwd = (f0 - f_minus) / eps
            scale = max(abs(fwd), abs(bwd))
            if scale > atol and abs(fwd - bwd) > 0.3 * scale:
                kinks.append(coord_name(i))
                continue
        if rel > max_rel:
            max_rel = rel
            worst = coord_name(i)
    return GradCheckReport(max_rel_err=max_rel, worst=worst, eps=eps,
                           n_checked=len(x0), n_below_atol=n_below,
                           non_checkable=kinks)
