"""Patch transformer producing one feature vector per image patch (no CLS token)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .transformer import Block, block_param_count, make_generator, trunc_normal


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 2
    d_vis: int = 64
    heads: int = 4
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_vis % self.heads:
            raise ValueError(f"d_vis {self.d_vis} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    def param_count(self) -> int:
        p2, d = self.patch_size ** 2, self.d_vis
        return p2 * d + d + self.num_tokens * d + self.depth * block_param_count(d, self.mlp_ratio)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W) -> (B, N, patch*patch) with patches in row-major grid order."""
    B, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, g_h, patch, g_w, patch).permute(0, 1, 3, 2, 4)
    return x.reshape(B, g_h * g_w, patch * patch)


class VisionEncoder(nn.Module):
    EMBEDDING_PARAMS = ("patch_embed", "patch_bias", "pos_embed")

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        g = make_generator(seed)
        d = config.d_vis
        self.patch_embed = nn.Parameter(trunc_normal((d, config.patch_size ** 2), g))
        self.patch_bias = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(trunc_normal((config.num_tokens, d), g))
        for i in range(config.depth):
            self.add_module(f"block{i}", Block(d, config.heads, config.mlp_ratio, g))

    @property
    def blocks(self) -> List[Block]:
        return [getattr(self, f"block{i}") for i in range(self.config.depth)]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        c = self.config
        if images.dim() != 3 or images.shape[1:] != (c.image_size, c.image_size):
            raise ShapeError(
                f"expected images of shape (B, {c.image_size}, {c.image_size}), got {tuple(images.shape)}"
            )
        x = F.linear(patchify(images, c.patch_size), self.patch_embed, self.patch_bias) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return x


def encode(images: torch.Tensor, encoder: VisionEncoder) -> torch.Tensor:
    """Patch features of shape (B, N, d_vis)."""
    return encoder(images)


def encoder_parameters(encoder: VisionEncoder) -> List[Tuple[str, Tuple[int, ...]]]:
    """Sorted ``(name, shape)`` listing, e.g. ``block0.attn.wq -> (d_vis, d_vis)``."""
    return sorted((n, tuple(p.shape)) for n, p in encoder.named_parameters())
