"""Pre-norm transformer blocks shared by the encoder and the decoder."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = self.attn_drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj_drop(self.proj(out))


class Block(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def run_blocks(blocks, x, where: str):
    """Apply blocks in order, failing loudly on the first non-finite output."""
    for i, block in enumerate(blocks):
        x = block(x)
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite activation after {where} block {i}")
    return x


def init_parameters(module: nn.Module, rng: np.random.Generator, std: float = 0.02) -> None:
    """Fill parameters from a dedicated numpy stream, in named order.

    Biases get zeros, 1-D ``.weight`` tensors (LayerNorm) get ones, and
    everything else is drawn N(0, std^2). Drawing from numpy rather than the
    torch RNG keeps initialization platform-stable and independent of any
    other random stream in the run.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith(".bias"):
                param.zero_()
            elif name.endswith(".weight") and param.ndim == 1:
                param.fill_(1.0)
            else:
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
