"""Patch embedding and a small pre-norm vision transformer split at a BKP layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._seeding import seeded_init

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 6
    split_layer: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    patch_size: int = 8
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    use_pos_embed: bool = True
    pool_prompt: bool = True
    ln_eps: float = 1e-5

    @property
    def n_patches(self) -> int:
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size

    def validate(self) -> None:
        if not 1 <= self.split_layer < self.depth:
            raise ValueError(f"split_layer must satisfy 1 <= split_layer < depth, got {self.split_layer}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 ``(B, H, W, C)`` images to standardised float tensors."""
    x = torch.as_tensor(np.asarray(images), dtype=dtype) / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, m, d = x.shape
        q, k, v = self.qkv(x).reshape(b, m, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * (d // self.heads) ** -0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, m, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, eps: float = 1e-5):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, attn = self.attn(self.norm1(x))
        x = x + a
        return x + self.mlp(self.norm2(x)), attn


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        p, c = config.patch_size, config.channels
        with seeded_init(seed, "init", 0):
            self.patch_embed = nn.Linear(p * p * c, config.dim)
            if config.use_pos_embed:
                self.pos_embed = nn.Parameter(torch.randn(1, config.n_patches, config.dim) * 0.02)
            else:
                self.register_parameter("pos_embed", None)
            self.blocks = nn.ModuleList(
                Block(config.dim, config.heads, config.mlp_ratio, config.ln_eps)
                for _ in range(config.depth)
            )

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, C)`` float images to ``(B, M, dim)`` tokens in raster patch order."""
        b, h, w, c = images.shape
        p = self.config.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        patches = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        tokens = self.patch_embed(patches.reshape(b, (h // p) * (w // p), p * p * c))
        if self.pos_embed is not None:
            tokens = tokens + self.pos_embed
        return tokens

    def _run(self, x, blocks, return_attention):
        maps = []
        for blk in blocks:
            x, attn = blk(x)
            maps.append(attn)
        return (x, maps) if return_attention else x

    def encode_lower(self, tokens: torch.Tensor, return_attention: bool = False):
        return self._run(tokens, self.blocks[: self.config.split_layer], return_attention)

    def encode_upper(self, tokens: torch.Tensor, return_attention: bool = False):
        return self._run(tokens, self.blocks[self.config.split_layer :], return_attention)

    def encode_joint(self, visual: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """Append the prompt token, run the remaining layers and average-pool."""
        if text.dim() == 2:
            text = text[:, None, :]
        if visual.shape[0] != text.shape[0] or visual.shape[-1] != text.shape[-1]:
            raise ValueError(f"cannot join visual {tuple(visual.shape)} with text {tuple(text.shape)}")
        out = self.encode_upper(torch.cat([visual, text], dim=1))
        if not self.config.pool_prompt:
            out = out[:, : visual.shape[1]]
        return out.mean(dim=1)

    def encode_query(self, images: torch.Tensor) -> torch.Tensor:
        x = self._run(self.patchify(images), self.blocks, False)
        return x.mean(dim=1)
