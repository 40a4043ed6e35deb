"""Per-sample feature store with momentum mixing and the InfoNCE loss.

The bank holds one unit-norm feature row per training sample, addressed by
the sample's dense integer id. Rows are read as contrastive keys before the
step's update, then refreshed with a normalized convex mix of the current
feature and the stored one:

    new_row = (m * feature + (1 - m) * old_row) / ||m * feature + (1 - m) * old_row||

No gradient ever flows through the bank; rows are plain buffers.
"""

from __future__ import annotations

import numpy as np
import torch

from .rng import generator_state, restore_generator, substream


class MemoryBank:
    """M x D table of unit-norm features, one row per sample id.

    Row i is only ever written by the sample with id i. Negative sampling
    draws from a dedicated stream, so bank usage never perturbs any other
    randomness in a run.
    """

    def __init__(self, size: int, dim: int, seed: int, mixing: float = 0.5,
                 dtype: torch.dtype = torch.float32):
        if size < 1 or dim < 1:
            raise ValueError(f"bank needs size >= 1 and dim >= 1, got {size}x{dim}")
        if not 0.0 < mixing <= 1.0:
            raise ValueError(f"mixing weight must be in (0, 1], got {mixing}")
        self.size = size
        self.dim = dim
        self.mixing = float(mixing)
        self.seed = int(seed)
        raw = substream(seed, "bank-init").normal(size=(size, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        self.table = torch.from_numpy(raw).to(dtype)
        self.epoch_tag = np.full(size, -1, dtype=np.int64)
        self._neg_rng = substream(seed, "bank-negatives")

    def keys_for(self, ids) -> torch.Tensor:
        """Current rows for the given sample ids (detached copies)."""
        ids = self._check_ids(ids)
        return self.table[ids].clone()

    def momentum_update(self, ids, features: torch.Tensor, epoch: int = 0) -> None:
        """Mix new unit-norm features into the addressed rows and renormalize.

        Keys for a step must be read before calling this. The whole batch is
        validated first, so a zero-norm mixture (antipodal feature/row pair at
        mixing 0.5) raises and leaves every row unchanged.
        """
        ids = self._check_ids(ids)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate sample ids within one bank update")
        features = features.detach().to(self.table.dtype)
        if features.shape != (len(ids), self.dim):
            raise ValueError(
                f"features shape {tuple(features.shape)} != ({len(ids)}, {self.dim})"
            )
        norms = features.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-3):
            raise ValueError("bank updates require unit-norm features")
        mixed = self.mixing * features + (1.0 - self.mixing) * self.table[ids]
        mixed_norm = mixed.norm(dim=1, keepdim=True)
        floor = torch.finfo(self.table.dtype).eps * 8
        degenerate = (mixed_norm <= floor).squeeze(1)
        if degenerate.any():
            bad = ids[degenerate.numpy()]
            raise ValueError(
                f"zero-norm momentum mixture for sample ids {bad.tolist()}; rows left unchanged"
            )
        self.table[ids] = mixed / mixed_norm
        self.epoch_tag[ids] = epoch

    def sample_negatives(self, count: int, exclude=()) -> torch.Tensor:
        """Draw ``count`` distinct rows uniformly, excluding the given ids."""
        exclude = np.asarray(exclude, dtype=np.int64)
        eligible = np.setdiff1d(np.arange(self.size, dtype=np.int64), exclude)
        if count < 1:
            raise ValueError(f"need at least one negative, got {count}")
        if count > len(eligible):
            raise ValueError(
                f"cannot draw {count} negatives from {len(eligible)} eligible rows "
                f"(bank size {self.size}, {len(exclude)} excluded)"
            )
        idx = self._neg_rng.choice(eligible, size=count, replace=False)
        return self.table[torch.from_numpy(idx)].clone()

    def _check_ids(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.int64)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.size):
            raise ValueError(
                f"sample id out of range [0, {self.size}): {int(ids.min())}..{int(ids.max())}"
            )
        return ids

    # -- checkpointing ----------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {
            "bank/table": self.table.numpy().copy(),
            "bank/epoch_tag": self.epoch_tag.copy(),
        }

    def state_meta(self) -> dict:
        return {
            "size": self.size,
            "dim": self.dim,
            "mixing": self.mixing,
            "seed": self.seed,
            "neg_rng": generator_state(self._neg_rng),
        }

    @classmethod
    def restore(cls, tensors: dict[str, np.ndarray], meta: dict) -> "MemoryBank":
        bank = cls(meta["size"], meta["dim"], meta["seed"], meta["mixing"])
        table = tensors["bank/table"]
        bank.table = torch.from_numpy(table.copy())
        bank.epoch_tag = tensors["bank/epoch_tag"].astype(np.int64).copy()
        bank._neg_rng = restore_generator(meta["neg_rng"])
        return bank


def info_nce(queries: torch.Tensor, keys: torch.Tensor, negatives: torch.Tensor,
             temperature: float) -> torch.Tensor:
    """Contrastive loss over a batch of queries with shared negatives.

    All rows are assumed unit-norm so dot products are cosine similarities.
    Per query: -log( exp(q.k+/t) / (exp(q.k+/t) + sum_i exp(q.k-_i/t)) ),
    evaluated as logsumexp(logits) - positive_logit for numerical stability;
    the batch loss is the arithmetic mean.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ValueError("need at least one negative row")
    if queries.shape != keys.shape:
        raise ValueError(f"queries {tuple(queries.shape)} != keys {tuple(keys.shape)}")
    pos = (queries * keys).sum(dim=-1) / temperature
    neg = queries @ negatives.T / temperature
    if not (torch.isfinite(pos).all() and torch.isfinite(neg).all()):
        raise RuntimeError("non-finite similarity in contrastive loss")
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - pos).mean()
