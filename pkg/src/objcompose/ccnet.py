"""Conditions collector: fuses source, box and hint features into one vector.

Four sub-maps, all linear in their token axis except the shared MLP:

* local source feature (LSIF): patchified source latent, linear embed, fixed
  sin-cos positions -> ``L_x`` tokens of width ``D``;
* box feature ``v_B``: extractor tokens of the box visualisation collapsed to
  one token by a 1x1 convolution over the token axis, then projected to ``D``;
* global source feature (GSIF): source and hint extractor tokens stacked on
  the token axis and mapped token by token through one shared MLP;
* fusion: ``[LSIF; v_B; GSIF]`` (``m`` tokens) collapsed to a single width-``D``
  vector by another 1x1 convolution over the token axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError
from .layers import Mlp, patchify, sincos_pos_embed_2d


@dataclass
class CCNetConfig:
    width: int = 128
    feat_width: int = 64
    latent_size: int = 16
    latent_channels: int = 4
    patch: int = 2
    box_tokens: int = 65
    source_tokens: int = 65
    hint_tokens: int = 65

    @property
    def lsif_length(self) -> int:
        return (self.latent_size // self.patch) ** 2

    @property
    def gsif_length(self) -> int:
        return self.source_tokens + self.hint_tokens

    @property
    def fusion_length(self) -> int:
        return self.lsif_length + 1 + self.gsif_length

    @classmethod
    def paper_scale(cls) -> "CCNetConfig":
        # 512px images -> 64x64x4 latents; 224px DINO inputs -> 1 + 16^2 tokens
        return cls(width=1024, feat_width=768, latent_size=64, box_tokens=257,
                   source_tokens=257, hint_tokens=257)


def _token_reduce_init(n: int) -> tuple[nn.Parameter, nn.Parameter]:
    # same bound as a Conv1d(n, 1, 1) default init
    bound = 1.0 / math.sqrt(n)
    w = nn.Parameter(torch.empty(n).uniform_(-bound, bound))
    b = nn.Parameter(torch.empty(1).uniform_(-bound, bound))
    return w, b


class ConditionsCollector(nn.Module):
    def __init__(self, config: CCNetConfig):
        super().__init__()
        if config.latent_size % config.patch:
            raise ShapeError(f"latent size {config.latent_size} not divisible by patch {config.patch}")
        self.config = config
        d, p = config.width, config.patch
        self.lsif_embed = nn.Linear(config.latent_channels * p * p, d)
        self.register_buffer(
            "lsif_pos", sincos_pos_embed_2d(d, config.latent_size // p).float().unsqueeze(0)
        )
        self.tbf_weight, self.tbf_bias = _token_reduce_init(config.box_tokens)
        self.tbf_proj = nn.Linear(config.feat_width, d) if config.feat_width != d else nn.Identity()
        self.gsif_mlp = Mlp(config.feat_width, d, d)
        self.fusion_weight, self.fusion_bias = _token_reduce_init(config.fusion_length)

    @property
    def width(self) -> int:
        return self.config.width

    def extract_lsif(self, source_latent: torch.Tensor) -> torch.Tensor:
        c = self.config
        if source_latent.dim() != 4 or source_latent.shape[1] != c.latent_channels:
            raise ShapeError(f"expected (B, {c.latent_channels}, h, w) latent, got {tuple(source_latent.shape)}")
        if tuple(source_latent.shape[2:]) != (c.latent_size, c.latent_size):
            raise ShapeError(f"collector built for {c.latent_size}x{c.latent_size} latents")
        tokens = patchify(source_latent, c.patch)
        return self.lsif_embed(tokens) + self.lsif_pos.to(tokens.dtype)

    def compute_tbf(self, box_tokens: torch.Tensor) -> torch.Tensor:
        c = self.config
        if box_tokens.dim() != 3 or box_tokens.shape[1:] != (c.box_tokens, c.feat_width):
            raise ShapeError(f"expected (B, {c.box_tokens}, {c.feat_width}) box tokens, got {tuple(box_tokens.shape)}")
        reduced = torch.einsum("l,bld->bd", self.tbf_weight, box_tokens) + self.tbf_bias
        return self.tbf_proj(reduced)

    def compute_gsif(self, source_tokens: torch.Tensor, hint_tokens: torch.Tensor) -> torch.Tensor:
        c = self.config
        if source_tokens.shape[-1] != hint_tokens.shape[-1] or source_tokens.shape[-1] != c.feat_width:
            raise ShapeError(
                f"token widths {source_tokens.shape[-1]}, {hint_tokens.shape[-1]} must equal {c.feat_width}"
            )
        return self.gsif_mlp(torch.cat([source_tokens, hint_tokens], dim=1))

    def fuse(self, stack: torch.Tensor) -> torch.Tensor:
        """1x1 token-axis reduction of a (B, m, D) stack to (B, D)."""
        if stack.shape[1] != self.fusion_weight.numel() or stack.shape[2] != self.width:
            raise ShapeError(
                f"fusion expects (B, {self.fusion_weight.numel()}, {self.width}), got {tuple(stack.shape)}"
            )
        return torch.einsum("m,bmd->bd", self.fusion_weight, stack) + self.fusion_bias

    def collect_condition(self, lsif, v_b, gsif) -> torch.Tensor:
        d = self.width
        if lsif.shape[-1] != d or v_b.shape[-1] != d or gsif.shape[-1] != d:
            raise ShapeError(f"all features must have width {d}")
        return self.fuse(torch.cat([lsif, v_b.unsqueeze(1), gsif], dim=1))

    def forward(self, source_latent, box_tokens, source_tokens, hint_tokens) -> torch.Tensor:
        return self.collect_condition(
            self.extract_lsif(source_latent),
            self.compute_tbf(box_tokens),
            self.compute_gsif(source_tokens, hint_tokens),
        )


def drop_condition(c: torch.Tensor, eta: float, generator: torch.Generator | None = None):
    """Replace each row of ``c`` by the zero vector with probability ``eta``.

    Returns ``(c_dropped, dropped)`` where ``dropped`` is the boolean row mask.
    A 1-D ``c`` is treated as a single row.
    """
    if not 0.0 <= eta <= 1.0:
        raise ParameterError(f"dropout probability {eta} outside [0, 1]")
    squeeze = c.dim() == 1
    rows = c.unsqueeze(0) if squeeze else c
    dropped = torch.rand(rows.shape[0], generator=generator) < eta
    out = torch.where(dropped.to(rows.device)[:, None], torch.zeros_like(rows), rows)
    return (out[0], dropped[0]) if squeeze else (out, dropped)
