"""Frozen toy ViT encoder producing a CLS token plus patch tokens.

Weights come from a fixed seed and never train; the encoder only needs to be
a stable, view-sensitive feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError
from .layers import Attention, Mlp, sincos_pos_embed_2d


@dataclass
class ExtractorConfig:
    image_size: int = 64
    patch: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    seed: int = 1234

    @property
    def num_tokens(self) -> int:
        return 1 + (self.image_size // self.patch) ** 2


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, eps=1e-6)
        self.mlp = Mlp(width, 4 * width)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TokenExtractor(nn.Module):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        if config.image_size % config.patch:
            raise ShapeError(f"image size {config.image_size} not divisible by patch {config.patch}")
        self.config = config
        w = config.width
        self.proj = nn.Conv2d(3, w, config.patch, config.patch)
        self.cls_token = nn.Parameter(torch.randn(1, 1, w) * 0.02)
        grid = config.image_size // config.patch
        self.register_buffer("pos_embed", sincos_pos_embed_2d(w, grid).float().unsqueeze(0))
        self.blocks = nn.ModuleList(_Block(w, config.heads) for _ in range(config.depth))
        self.norm = nn.LayerNorm(w, eps=1e-6)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        s, p = self.config.image_size, self.config.patch
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images (B, 3, H, W), got {tuple(images.shape)}")
        if images.shape[-1] % p or images.shape[-2] % p:
            raise ShapeError(f"image size {tuple(images.shape[-2:])} not divisible by patch {p}")
        if images.shape[-1] != s or images.shape[-2] != s:
            raise ShapeError(f"extractor built for {s}x{s}, got {tuple(images.shape[-2:])}")
        x = self.proj(images).flatten(2).transpose(1, 2) + self.pos_embed.to(images.dtype)
        x = torch.cat([self.cls_token.to(images.dtype).expand(len(x), -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def build_extractor(config: ExtractorConfig | None = None) -> TokenExtractor:
    config = config or ExtractorConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = TokenExtractor(config)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def extract_tokens(images: torch.Tensor, extractor: TokenExtractor, batch: int = 256) -> torch.Tensor:
    """(B, 3, H, W) in [-1, 1] -> (B, 1 + (H/patch)^2, width), CLS first."""
    out = [extractor(images[i:i + batch]) for i in range(0, len(images), batch)]
    return torch.cat(out) if out else extractor(images)
