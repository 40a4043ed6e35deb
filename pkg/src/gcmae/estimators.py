"""scikit-learn style estimators wrapping the pretraining and probe pipelines.

`GlobalContrastMAE` is a transformer: `fit(X)` runs self-supervised
pretraining on a stack of tiles, `transform(X)` returns unit-norm pooled
features, so the model drops into sklearn pipelines in front of any
off-the-shelf classifier. `LinearProbeClassifier` reproduces the linear-probe
protocol (frozen backbone, stratified label fraction) as a classifier.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import ProbeConfig, RunConfig
from .datasets import DatasetSpec, TileDataset, compute_norm_stats
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .evaluation import extract_features
from .training import pretrain
from .validation import check_labels, check_tile_array


def _dataset_from_arrays(X: np.ndarray, y=None) -> TileDataset:
    n = len(X)
    labels = check_labels(y, n) if y is not None else np.zeros(n, dtype=np.int64)
    return TileDataset(
        pixels=X,
        ids=np.arange(n, dtype=np.int64),
        labels=labels,
        split=np.array(["train"] * n, dtype="<U5"),
        sources=["array"] * n,
        grid_xy=np.zeros((n, 2), dtype=np.int64),
        class_names=[str(c) for c in np.unique(labels)],
        stats=compute_norm_stats(X),
        load_report={"kind": "array"},
    )


class GlobalContrastMAE(BaseEstimator, TransformerMixin):
    """Self-supervised tile representation learner.

    fit(X) pretrains on unlabeled tiles (masked-patch reconstruction plus
    memory-bank contrastive learning); transform(X) returns one unit-norm
    feature vector per tile.
    """

    def __init__(self, *, patch_size=16, embed_dim=128, depth=4, heads=4,
                 mlp_ratio=4.0, dropout=0.0, pooling="mean", decoder_dim=64,
                 decoder_depth=8, decoder_heads=4, mask_ratio=0.5, epochs=80,
                 batch_size=64, lr=1e-3, weight_decay=0.05, beta1=0.9, beta2=0.95,
                 lambda_recon=1.0, lambda_contrast=0.1, temperature=0.07,
                 bank_mixing=0.5, num_negatives=8192, contrastive=True,
                 loss_on="masked", target_norm="dataset", dtype="float32", seed=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.dropout = dropout
        self.pooling = pooling
        self.decoder_dim = decoder_dim
        self.decoder_depth = decoder_depth
        self.decoder_heads = decoder_heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda_recon = lambda_recon
        self.lambda_contrast = lambda_contrast
        self.temperature = temperature
        self.bank_mixing = bank_mixing
        self.num_negatives = num_negatives
        self.contrastive = contrastive
        self.loss_on = loss_on
        self.target_norm = target_norm
        self.dtype = dtype
        self.seed = seed

    def _run_config(self, X: np.ndarray) -> RunConfig:
        h, w, c = X.shape[1:]
        return RunConfig(
            seed=self.seed,
            epochs=self.epochs,
            batch_size=self.batch_size,
            mask_ratio=self.mask_ratio,
            lambda1=self.lambda_recon,
            lambda2=self.lambda_contrast,
            temperature=self.temperature,
            bank_mixing=self.bank_mixing,
            num_negatives=self.num_negatives,
            contrastive=self.contrastive,
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            loss_on=self.loss_on,
            target_norm=self.target_norm,
            dtype=self.dtype,
            encoder=EncoderConfig(patch_size=self.patch_size, dim=self.embed_dim,
                                  depth=self.depth, heads=self.heads,
                                  mlp_ratio=self.mlp_ratio, dropout=self.dropout,
                                  pooling=self.pooling),
            decoder=DecoderConfig(dim=self.decoder_dim, depth=self.decoder_depth,
                                  heads=self.decoder_heads),
            data=DatasetSpec(tile_size=h, channels=c),
        )

    def fit(self, X, y=None):
        X = check_tile_array(X, self.patch_size)
        dataset = _dataset_from_arrays(X)
        result = pretrain(self._run_config(X), dataset)
        self.model_ = result.model
        self.bank_ = result.bank
        self.history_ = result.history
        self.stats_ = result.stats
        self.n_features_ = self.embed_dim
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("GlobalContrastMAE is not fitted; call fit first")
        X = check_tile_array(X, self.patch_size)
        return extract_features(self.model_.encoder, X, self.stats_)


class LinearProbeClassifier(BaseEstimator, ClassifierMixin):
    """Linear classifier on frozen backbone features.

    ``backbone`` is a fitted GlobalContrastMAE or a pretraining checkpoint
    path. The probe subsamples a stratified ``fraction`` of the labels and
    trains until the validation loss plateaus; backbone weights never change.
    """

    def __init__(self, backbone=None, *, fraction=1.0, lr=0.05, max_epochs=200,
                 patience=5, val_fraction=0.2, seed=0):
        self.backbone = backbone
        self.fraction = fraction
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def _source(self):
        if self.backbone is None:
            raise ValueError("LinearProbeClassifier needs a backbone")
        if isinstance(self.backbone, GlobalContrastMAE):
            if not hasattr(self.backbone, "model_"):
                raise NotFittedError("backbone GlobalContrastMAE is not fitted")
            return (self.backbone.model_.encoder, self.backbone.stats_)
        return self.backbone  # checkpoint path

    def fit(self, X, y):
        from .evaluation import _train_head, resolve_encoder, stratified_subsample
        from .rng import substream

        X = check_tile_array(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        cfg = ProbeConfig(lr=self.lr, max_epochs=self.max_epochs,
                          patience=self.patience, val_fraction=self.val_fraction,
                          seed=self.seed)
        encoder, stats, _ = resolve_encoder(self._source())
        sub = stratified_subsample(encoded, self.fraction,
                                   substream(self.seed, "probe-subsample"))
        features = extract_features(encoder, X[sub], stats)
        head, epochs, _losses = _train_head(features, encoded[sub],
                                            len(self.classes_), cfg, self.seed)
        self.encoder_ = encoder
        self.stats_ = stats
        self.head_ = head
        self.subset_indices_ = sub
        self.epochs_trained_ = epochs
        return self

    def _check_fitted(self):
        if not hasattr(self, "head_"):
            raise NotFittedError("LinearProbeClassifier is not fitted; call fit first")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_tile_array(X)
        features = extract_features(self.encoder_, X, self.stats_)
        with torch.no_grad():
            return self.head_(torch.from_numpy(features)).numpy()

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.from_numpy(self.decision_function(X))
        return F.softmax(logits, dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]
