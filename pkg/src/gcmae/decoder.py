"""Reconstruction head: rebuild per-patch pixels from visible latents.

The decoder receives one token per grid position: a linear projection of the
encoder latent at visible positions, and a single shared learnable mask token
everywhere else. Every position then gets its own entry from a decoder-side
learnable positional-embedding table (separate from the encoder's), restoring
row-major patch order before the transformer stack and the pixel head run.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .transformer import Block, run_blocks

LOSS_MODES = ("masked", "all")


@dataclass
class DecoderConfig:
    dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")


class MaskedDecoder(nn.Module):
    """Predicts all N patches' pixel vectors from visible-patch latents.

    depth=0 is a degenerate test-only configuration: the transformer stack
    and final norm disappear and only the pixel head remains.
    """

    def __init__(self, cfg: DecoderConfig, n_patches: int, patch_dim: int, encoder_dim: int):
        super().__init__()
        self.cfg = cfg
        self.n_patches = n_patches
        self.patch_dim = patch_dim
        self.latent_proj = nn.Linear(encoder_dim, cfg.dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(n_patches, cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim) if cfg.depth > 0 else nn.Identity()
        self.head = nn.Linear(cfg.dim, patch_dim)

    def assemble_input(self, latents: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Build the full (B, N, dim) decoder sequence in row-major patch order.

        ``latents`` is (B, V, encoder_dim); ``visible`` is (V,) shared or
        (B, V) per-sample. Positions not listed in ``visible`` receive the
        shared mask token; every position receives its positional embedding.
        """
        if visible.shape[-1] != latents.shape[-2]:
            raise ValueError(
                f"plan has {visible.shape[-1]} visible patches but got {latents.shape[-2]} latents"
            )
        if visible.numel() and int(visible.max()) >= self.n_patches:
            raise ValueError(
                f"visible index {int(visible.max())} out of range for {self.n_patches} patches"
            )
        projected = self.latent_proj(latents)
        batch_shape = projected.shape[:-2]
        seq = self.mask_token.expand(*batch_shape, self.n_patches, self.cfg.dim)
        if visible.ndim == 1:
            visible = visible.expand(*batch_shape, -1)
        index = visible.unsqueeze(-1).expand(*batch_shape, -1, self.cfg.dim)
        seq = seq.scatter(-2, index, projected)
        return seq + self.pos_embed

    def decode(self, seq: torch.Tensor) -> torch.Tensor:
        """Transformer stack + linear pixel head; returns (B, N, patch_dim)."""
        if seq.shape[-2] != self.n_patches:
            raise ValueError(f"decoder sequence has {seq.shape[-2]} rows, expected {self.n_patches}")
        if self.blocks:
            seq = self.norm(run_blocks(self.blocks, seq, "decoder"))
        return self.head(seq)

    def forward(self, latents: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        return self.decode(self.assemble_input(latents, visible))


def mse_loss(recon: torch.Tensor, target: torch.Tensor, masked: torch.Tensor | None,
             mode: str = "masked") -> torch.Tensor:
    """Mean squared error over the selected pixel set.

    ``masked`` lists masked patch indices, (M,) shared or (B, M) per-sample.
    mode="masked" averages over masked-patch pixels only; mode="all" averages
    over every pixel of every patch.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
    if recon.shape != target.shape:
        raise ValueError(f"recon shape {tuple(recon.shape)} != target shape {tuple(target.shape)}")
    diff = recon - target
    if mode == "all":
        return (diff * diff).mean()
    if masked is None or masked.shape[-1] == 0:
        raise ValueError("masked-only loss undefined: no masked patches selected (ratio 0?)")
    if masked.ndim == 1:
        selected = diff[..., masked, :]
    else:
        index = masked.unsqueeze(-1).expand(*masked.shape, diff.shape[-1])
        selected = diff.gather(-2, index)
    return (selected * selected).mean()
