"""Downstream evaluation: linear probe, full fine-tuning, accuracy and AUC.

Probing extracts features with the frozen encoder using a full-visibility
forward pass (classification consumes the whole tile, so nothing is masked),
then trains a softmax head until the validation loss plateaus. Fine-tuning
starts from the probe solution and unfreezes everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .config import FineTuneConfig, ProbeConfig
from .datasets import TileDataset
from .encoder import PatchEncoder
from .optim import AdamW
from .patching import patchify_batch, round_half_up
from .rng import substream
from .training import PretrainResult, load_model, torch_dtype
from .transformer import init_parameters


@dataclass
class EvalReport:
    accuracy: float  # percent
    auc: float  # percent
    n_eval: int
    label_fraction: float
    split_seed: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "n_eval": self.n_eval,
            "label_fraction": self.label_fraction,
            "split_seed": self.split_seed,
            "provenance": self.provenance,
        }


def accuracy(predictions, labels) -> float:
    """Percent of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"got {predictions.shape} predictions for {labels.shape} labels")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return 100.0 * float((predictions == labels).mean())


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC as a percent, ties counting one half.

    1-D scores: binary labels. 2-D scores (n, C): macro one-vs-rest average
    over classes. A split with only one class present is an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return 100.0 * _binary_auc(scores, labels)
    if scores.ndim == 2:
        per_class = [_binary_auc(scores[:, c], labels == c) for c in range(scores.shape[1])]
        return 100.0 * float(np.mean(per_class))
    raise ValueError(f"scores must be 1-D or 2-D, got shape {scores.shape}")


def _binary_auc(scores: np.ndarray, labels) -> float:
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"got {scores.shape} scores for {labels.shape} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUC undefined: only one class present ({n_pos} positives, {n_neg} negatives)"
        )
    ranks = rankdata(scores)  # average ranks handle ties
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def stratified_subsample(labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Indices of round(fraction * class_size) examples per class, sorted.

    A class whose quota rounds to zero would vanish from the subsample;
    that is an error naming the class.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    chosen = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        quota = round_half_up(fraction * len(members))
        if quota == 0:
            raise ValueError(
                f"class {cls} absent from the subsample: fraction {fraction} of "
                f"{len(members)} examples rounds to zero"
            )
        chosen.append(rng.permutation(members)[:quota])
    return np.sort(np.concatenate(chosen))


def extract_features(encoder: PatchEncoder, pixels: np.ndarray,
                     stats: tuple[np.ndarray, np.ndarray],
                     batch_size: int = 256) -> np.ndarray:
    """Pooled unit-norm tile features from a full-visibility forward pass."""
    mean, std = stats
    p = encoder.cfg.patch_size
    n_patches = encoder.n_patches
    dtype = next(encoder.parameters()).dtype
    visible = torch.arange(n_patches)
    was_training = encoder.training
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(pixels), batch_size):
            batch = (pixels[lo:lo + batch_size] - mean) / std
            patches = torch.from_numpy(patchify_batch(batch, p)).to(dtype)
            latents = encoder(patches, visible)
            chunks.append(encoder.tile_feature(latents).numpy())
    if was_training:
        encoder.train()
    return np.concatenate(chunks).astype(np.float32)


def resolve_encoder(source) -> tuple[PatchEncoder, tuple[np.ndarray, np.ndarray], dict]:
    """Accepts a checkpoint path, a PretrainResult, or (encoder, stats)."""
    if isinstance(source, (str, Path)):
        model, cfg, meta = load_model(source)
        stats = (np.array(meta["stats"]["mean"], dtype=np.float32),
                 np.array(meta["stats"]["std"], dtype=np.float32))
        return model.encoder, stats, meta
    if isinstance(source, PretrainResult):
        meta = {"mask_ratio": source.config.mask_ratio, "pooling": source.config.encoder.pooling}
        return source.model.encoder, source.stats, meta
    encoder, stats = source
    return encoder, stats, {}


@dataclass
class ProbeResult:
    head: nn.Linear
    subset_indices: np.ndarray  # dataset-level indices of the labeled subset
    epochs_trained: int
    val_losses: list[float]
    report: EvalReport


def probe_train(source, dataset: TileDataset, fraction: float = 1.0, seed: int = 0,
                cfg: ProbeConfig | None = None) -> ProbeResult:
    """Train a linear classifier on frozen features and evaluate on the test split.

    The labeled subset is a stratified fraction of the train split. Training
    runs full-batch and stops when the validation cross-entropy has not
    improved by ``min_delta`` for ``patience`` consecutive epochs.
    """
    cfg = cfg or ProbeConfig()
    encoder, stats, meta = resolve_encoder(source)
    n_classes = len(np.unique(dataset.labels))

    train_idx = dataset.indices("train")
    sub = stratified_subsample(dataset.labels[train_idx], fraction,
                               substream(seed, "probe-subsample"))
    subset = train_idx[sub]
    features = extract_features(encoder, dataset.pixels[subset], stats)
    labels = dataset.labels[subset]

    head, epochs_trained, val_losses = _train_head(
        features, labels, n_classes, cfg, seed)

    test_idx = dataset.indices("test")
    report = _evaluate_features(
        head,
        extract_features(encoder, dataset.pixels[test_idx], stats),
        dataset.labels[test_idx],
        label_fraction=fraction,
        split_seed=seed,
        provenance={"mask_ratio": meta.get("mask_ratio"), "mode": "probe"},
    )
    return ProbeResult(head=head, subset_indices=subset, epochs_trained=epochs_trained,
                       val_losses=val_losses, report=report)


def _train_head(features: np.ndarray, labels: np.ndarray, n_classes: int,
                cfg: ProbeConfig, seed: int) -> tuple[nn.Linear, int, list[float]]:
    head = nn.Linear(features.shape[1], n_classes)
    init_parameters(head, substream(seed, "probe-init"))

    val_rng = substream(seed, "probe-valsplit")
    val_mask = np.zeros(len(labels), dtype=bool)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) >= 2:
            n_val = max(1, round_half_up(cfg.val_fraction * len(members)))
            val_mask[val_rng.permutation(members)[:n_val]] = True

    x = torch.from_numpy(features)
    y = torch.from_numpy(labels)
    x_tr, y_tr = x[~val_mask], y[~val_mask]
    x_val, y_val = x[val_mask], y[val_mask]
    monitor_train = len(y_val) == 0  # tiny subsets: plateau on training loss

    opt = AdamW(dict(head.named_parameters()), lr=cfg.lr,
                weight_decay=cfg.weight_decay)
    best = float("inf")
    bad = 0
    val_losses: list[float] = []
    epochs = 0
    for epochs in range(1, cfg.max_epochs + 1):
        loss = F.cross_entropy(head(x_tr), y_tr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            monitored = loss if monitor_train else F.cross_entropy(head(x_val), y_val)
        val_losses.append(float(monitored))
        if float(monitored) < best - cfg.min_delta:
            best = float(monitored)
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return head, epochs, val_losses


def _evaluate_features(head: nn.Linear, features: np.ndarray, labels: np.ndarray,
                       label_fraction: float, split_seed: int,
                       provenance: dict) -> EvalReport:
    with torch.no_grad():
        probs = F.softmax(head(torch.from_numpy(features)), dim=1).numpy()
    preds = probs.argmax(axis=1)
    scores = probs[:, 1] if probs.shape[1] == 2 else probs
    return EvalReport(
        accuracy=accuracy(preds, labels),
        auc=auc(scores, labels),
        n_eval=len(labels),
        label_fraction=label_fraction,
        split_seed=split_seed,
        provenance=provenance,
    )


@dataclass
class FineTuneResult:
    encoder: PatchEncoder
    head: nn.Linear
    report: EvalReport
    probe_report: EvalReport


def fine_tune(source, dataset: TileDataset, cfg: FineTuneConfig | None = None,
              probe_cfg: ProbeConfig | None = None, fraction: float = 1.0,
              seed: int = 0) -> FineTuneResult:
    """Unfreeze the encoder and train it jointly with the classifier head.

    The head starts from the linear-probe solution, so zero fine-tune epochs
    reproduce the probe metrics exactly.
    """
    cfg = cfg or FineTuneConfig()
    encoder, stats, meta = resolve_encoder(source)
    probe = probe_train((encoder, stats), dataset, fraction=fraction, seed=seed,
                        cfg=probe_cfg)
    head = probe.head

    subset = probe.subset_indices
    pixels = dataset.pixels[subset]
    labels = dataset.labels[subset]
    mean, std = stats
    p = encoder.cfg.patch_size
    dtype = next(encoder.parameters()).dtype
    visible = torch.arange(encoder.n_patches)

    if cfg.epochs > 0:
        params = dict(
            [(f"encoder.{k}", v) for k, v in encoder.named_parameters()]
            + [(f"head.{k}", v) for k, v in head.named_parameters()]
        )
        opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        order_rng = substream(seed, "finetune-order")
        encoder.train()
        for _ in range(cfg.epochs):
            order = order_rng.permutation(len(subset))
            for lo in range(0, len(subset), cfg.batch_size):
                ids = order[lo:lo + cfg.batch_size]
                batch = (pixels[ids] - mean) / std
                patches = torch.from_numpy(patchify_batch(batch, p)).to(dtype)
                feats = encoder.tile_feature(encoder(patches, visible))
                loss = F.cross_entropy(head(feats.float()), torch.from_numpy(labels[ids]))
                opt.zero_grad()
                loss.backward()
                opt.step()
        encoder.eval()

    test_idx = dataset.indices("test")
    report = _evaluate_features(
        head,
        extract_features(encoder, dataset.pixels[test_idx], stats),
        dataset.labels[test_idx],
        label_fraction=fraction,
        split_seed=seed,
        provenance={"mask_ratio": meta.get("mask_ratio"), "mode": "finetune",
                    "epochs": cfg.epochs},
    )
    return FineTuneResult(encoder=encoder, head=head, report=report,
                          probe_report=probe.report)
