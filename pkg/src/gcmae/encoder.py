"""ViT-style encoder over visible patches, plus per-tile feature pooling.

The encoder linearly projects each visible patch, adds the learnable 1D
positional embedding of that patch's grid index, and runs the token sequence
through pre-norm transformer blocks. A per-tile feature is formed either by
mean-pooling the visible-patch latents (default) or by a learnable class
token, and is always L2-normalized so downstream cosine similarities are
plain dot products.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .transformer import Block, run_blocks

POOLING_MODES = ("mean", "cls")


@dataclass
class EncoderConfig:
    patch_size: int = 16
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    pooling: str = "mean"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")


class PatchEncoder(nn.Module):
    """Maps visible patches of a tile to latent vectors.

    depth=0 builds a degenerate identity encoder (no blocks, no final norm);
    that configuration exists for tests only.
    """

    def __init__(self, cfg: EncoderConfig, n_patches: int, patch_dim: int):
        super().__init__()
        self.cfg = cfg
        self.n_patches = n_patches
        self.patch_dim = patch_dim
        self.proj = nn.Linear(patch_dim, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(n_patches, cfg.dim))
        if cfg.pooling == "cls":
            self.cls_token = nn.Parameter(torch.zeros(cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim) if cfg.depth > 0 else nn.Identity()

    def embed_patches(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Project visible patches and add their positional embeddings.

        ``patches`` is (..., V, patch_dim); ``visible`` is (V,) shared across
        the batch or (B, V) per-sample grid indices.
        """
        if patches.shape[-1] != self.patch_dim:
            raise ValueError(
                f"patch length {patches.shape[-1]} does not match configured {self.patch_dim}"
            )
        if visible.numel() and int(visible.max()) >= self.n_patches:
            raise ValueError(
                f"visible index {int(visible.max())} out of range for {self.n_patches} patches"
            )
        if visible.shape[-1] != patches.shape[-2]:
            raise ValueError(
                f"plan has {visible.shape[-1]} visible patches but got {patches.shape[-2]}"
            )
        return self.proj(patches) + self.pos_embed[visible]

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the transformer stack; identity when depth is 0."""
        if tokens.shape[-1] != self.cfg.dim:
            raise ValueError(f"token dim {tokens.shape[-1]} != {self.cfg.dim}")
        if not self.blocks:
            return tokens
        return self.norm(run_blocks(self.blocks, tokens, "encoder"))

    def forward(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """embed -> (optional cls token) -> encode; returns (B, V[+1], dim)."""
        tokens = self.embed_patches(patches, visible)
        if self.cfg.pooling == "cls":
            cls = self.cls_token.expand(*tokens.shape[:-2], 1, self.cfg.dim)
            tokens = torch.cat([cls, tokens], dim=-2)
        return self.encode(tokens)

    def tile_feature(self, latents: torch.Tensor) -> torch.Tensor:
        """Unit-norm per-tile feature per the configured pooling mode."""
        if self.cfg.pooling == "cls":
            return _normalize_rows(latents[..., 0, :])
        return pool_latent(latents)


def pool_latent(latents: torch.Tensor) -> torch.Tensor:
    """Mean over the sequence dimension followed by L2 normalization."""
    if latents.shape[-2] == 0:
        raise ValueError("cannot pool an empty latent sequence")
    return _normalize_rows(latents.mean(dim=-2))


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if not torch.isfinite(norm).all():
        raise RuntimeError("non-finite latent norm while pooling")
    if (norm == 0).any():
        raise ValueError("zero vector cannot be L2-normalized while pooling")
    return x / norm
