"""Tile <-> patch-sequence conversion, random masking, reconstruction targets.

A tile is an H x W x C float array; a patch sequence is the same pixels
re-laid-out as N flattened (P*P*C)-vectors in row-major grid order. Masking
partitions the N patch indices into a visible and a masked set by drawing a
seeded random permutation and taking a prefix, so a plan is fully determined
by (n_patches, ratio, seed) on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

TARGET_NORM_MODES = ("dataset", "per_patch")
PER_PATCH_STD_EPS = 1e-6


@dataclass(frozen=True)
class PatchSeq:
    """Flattened patches of one tile plus the geometry needed to invert."""

    patches: np.ndarray  # (N, P*P*C), row-major grid order
    grid: tuple[int, int]  # (H/P, W/P)
    patch_size: int
    channels: int

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into visible/masked sets.

    Both index lists are sorted ascending. ``seed`` is the value that
    reproduces the plan exactly via `sample_mask`.
    """

    visible: np.ndarray = field(repr=False)
    masked: np.ndarray = field(repr=False)
    ratio: float
    seed: int

    @property
    def n_patches(self) -> int:
        return len(self.visible) + len(self.masked)


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (for x >= 0)."""
    return int(math.floor(x + 0.5))


def patchify(pixels: np.ndarray, patch_size: int) -> PatchSeq:
    """Cut an (H, W, C) tile into non-overlapping flattened patches.

    Values are copied, not transformed; `unpatchify` inverts bit-exactly.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ValueError(f"expected (H, W, C) pixels, got shape {pixels.shape}")
    h, w, c = pixels.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(
            f"tile dims {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    patches = (
        pixels.reshape(gh, patch_size, gw, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * c)
    )
    return PatchSeq(patches=patches, grid=(gh, gw), patch_size=patch_size, channels=c)


def patchify_batch(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Vectorized patchify for a (B, H, W, C) stack; returns (B, N, P*P*C)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) pixels, got shape {pixels.shape}")
    b, h, w, c = pixels.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(
            f"tile dims {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    return (
        pixels.reshape(b, gh, patch_size, gw, patch_size, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * gw, patch_size * patch_size * c)
    )


def unpatchify(seq: PatchSeq) -> np.ndarray:
    """Rebuild the (H, W, C) tile from a full patch sequence."""
    gh, gw = seq.grid
    p, c = seq.patch_size, seq.channels
    patches = np.asarray(seq.patches)
    if patches.shape[0] != gh * gw:
        raise ValueError(
            f"need {gh * gw} patches for grid {seq.grid}, got {patches.shape[0]}"
        )
    if patches.shape[1] != p * p * c:
        raise ValueError(
            f"patch length {patches.shape[1]} != {p}*{p}*{c}"
        )
    return (
        patches.reshape(gh, gw, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * p, gw * p, c)
    )


def unpatchify_batch(patches: np.ndarray, grid: tuple[int, int], patch_size: int,
                     channels: int) -> np.ndarray:
    """Inverse of `patchify_batch`; patches is (B, N, P*P*C)."""
    gh, gw = grid
    b = patches.shape[0]
    return (
        patches.reshape(b, gh, gw, patch_size, patch_size, channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * patch_size, gw * patch_size, channels)
    )


def sample_mask(n_patches: int, ratio: float, seed: int) -> MaskPlan:
    """Draw a uniform random mask covering round(ratio * n_patches) patches.

    The sampler permutes all indices with a PCG64 stream keyed by ``seed``
    and masks the prefix, so identical (n_patches, ratio, seed) triples give
    identical plans everywhere. The masked count uses round-half-up.
    """
    if n_patches < 1:
        raise ValueError(f"n_patches must be >= 1, got {n_patches}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n_masked = round_half_up(ratio * n_patches)
    perm = substream(seed, "mask-plan").permutation(n_patches)
    masked = np.sort(perm[:n_masked]).astype(np.int64)
    visible = np.sort(perm[n_masked:]).astype(np.int64)
    return MaskPlan(visible=visible, masked=masked, ratio=float(ratio), seed=int(seed))


def normalize_target(pixels: np.ndarray, mode: str,
                     stats: tuple[np.ndarray, np.ndarray] | None = None,
                     patch_size: int = 16) -> PatchSeq:
    """Build the reconstruction target for one tile.

    ``dataset`` mode subtracts the per-channel dataset mean and divides by the
    per-channel std (``stats = (mean, std)`` required). ``per_patch`` mode
    standardizes each patch to mean 0 / std 1, with PER_PATCH_STD_EPS added to
    the (population) std so constant patches map to zeros.
    """
    if mode not in TARGET_NORM_MODES:
        raise ValueError(f"unknown target norm mode {mode!r}; use one of {TARGET_NORM_MODES}")
    pixels = np.asarray(pixels)
    if mode == "dataset":
        if stats is None:
            raise ValueError("dataset norm mode requires per-channel (mean, std) stats")
        mean, std = (np.asarray(s, dtype=pixels.dtype) for s in stats)
        zero = np.flatnonzero(std == 0)
        if zero.size:
            raise ValueError(f"zero-variance channel {int(zero[0])} cannot be dataset-normalized")
        return patchify((pixels - mean) / std, patch_size)
    seq = patchify(pixels, patch_size)
    p = seq.patches
    mean = p.mean(axis=1, keepdims=True)
    std = p.std(axis=1, keepdims=True)  # population std
    normed = (p - mean) / (std + PER_PATCH_STD_EPS)
    return PatchSeq(normed, seq.grid, seq.patch_size, seq.channels)


def normalize_target_batch(pixels: np.ndarray, mode: str,
                           stats: tuple[np.ndarray, np.ndarray] | None = None,
                           patch_size: int = 16) -> np.ndarray:
    """Batched `normalize_target`; pixels is (B, H, W, C), returns (B, N, P*P*C)."""
    if mode not in TARGET_NORM_MODES:
        raise ValueError(f"unknown target norm mode {mode!r}; use one of {TARGET_NORM_MODES}")
    pixels = np.asarray(pixels)
    if mode == "dataset":
        if stats is None:
            raise ValueError("dataset norm mode requires per-channel (mean, std) stats")
        mean, std = (np.asarray(s, dtype=pixels.dtype) for s in stats)
        zero = np.flatnonzero(std == 0)
        if zero.size:
            raise ValueError(f"zero-variance channel {int(zero[0])} cannot be dataset-normalized")
        return patchify_batch((pixels - mean) / std, patch_size)
    patches = patchify_batch(pixels, patch_size)
    mean = patches.mean(axis=2, keepdims=True)
    std = patches.std(axis=2, keepdims=True)
    return (patches - mean) / (std + PER_PATCH_STD_EPS)
