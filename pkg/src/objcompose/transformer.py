"""Hint-concatenated diffusion transformer with an asymmetric masking branch.

``forward_full`` runs every block on the full token sequence.
``forward_masked`` is the training-only regulariser: the first
``encoder_depth`` blocks see only the kept tokens, a side-interpolator
(residual self-attention) restores the full sequence with a learnable mask
token at dropped positions, and the remaining ``decoder_depth`` blocks run on
the full length.  Both paths share the same block weights.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError
from .layers import (
    Attention,
    Mlp,
    TimestepEmbedder,
    modulate,
    patchify,
    sincos_pos_embed_2d,
    unpatchify,
)


@dataclass
class ModelConfig:
    latent_size: int = 16
    latent_channels: int = 4
    hint_channels: int = 4
    patch: int = 2
    width: int = 128
    heads: int = 8
    encoder_depth: int = 4
    decoder_depth: int = 2
    mlp_ratio: float = 4.0
    freq_dim: int = 256

    def validate(self) -> None:
        if self.width % self.heads:
            raise ParameterError(f"width {self.width} not divisible by {self.heads} heads")
        if self.width % 4:
            raise ParameterError("width must be divisible by 4 for 2-D positional tables")
        if self.latent_size % self.patch:
            raise ParameterError(f"latent size {self.latent_size} not divisible by patch {self.patch}")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ParameterError("encoder_depth and decoder_depth must both be >= 1")

    @property
    def depth(self) -> int:
        return self.encoder_depth + self.decoder_depth

    @property
    def num_tokens(self) -> int:
        return (self.latent_size // self.patch) ** 2

    @property
    def in_channels(self) -> int:
        return self.hint_channels + self.latent_channels

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        # 24 blocks total; the encoder/decoder split itself is not pinned down
        return cls(latent_size=64, width=1024, heads=16, encoder_depth=16, decoder_depth=8)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskSpec:
    ratio: float
    length: int
    masked: torch.Tensor  # (B, n_masked), ascending
    kept: torch.Tensor  # (B, n_kept), ascending

    @property
    def num_masked(self) -> int:
        return self.masked.shape[1]


def mask_tokens(tokens: torch.Tensor, ratio: float, generator: torch.Generator | None = None):
    """Drop ``floor(ratio * L)`` tokens per row uniformly without replacement.

    Returns ``(kept_tokens, spec)``; kept tokens keep their original order.
    """
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must be in [0, 1), got {ratio}")
    b, n, d = tokens.shape
    n_mask = int(ratio * n)
    noise = torch.rand(b, n, generator=generator)
    order = torch.argsort(noise, dim=1)
    masked = order[:, :n_mask].sort(dim=1).values
    kept = order[:, n_mask:].sort(dim=1).values
    kept_tokens = torch.gather(tokens, 1, kept.to(tokens.device)[..., None].expand(-1, -1, d))
    return kept_tokens, MaskSpec(ratio, n, masked, kept)


class DiTBlock(nn.Module):
    """Transformer block with adaLN-Zero conditioning."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(width, int(width * mlp_ratio))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, width: int, patch: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(width, patch * patch * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class SideInterpolator(nn.Module):
    """z + self_attention(z); the output projection starts at zero."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads, zero_out=True)

    def forward(self, z: torch.Tensor, return_weights: bool = False):
        out, weights = self.attn(self.norm(z), return_weights=True)
        z = z + out
        return (z, weights) if return_weights else z


class MaskedDenoiser(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d, p = config.width, config.patch
        self.x_embedder = nn.Linear(config.in_channels * p * p, d)
        self.register_buffer(
            "pos_embed", sincos_pos_embed_2d(d, config.latent_size // p).float().unsqueeze(0)
        )
        self.t_embedder = TimestepEmbedder(d, config.freq_dim)
        self.blocks = nn.ModuleList(DiTBlock(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.side_interpolator = SideInterpolator(d, config.heads)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.final_layer = FinalLayer(d, p, config.latent_channels)
        self.last_encoder_length: int | None = None
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

        self.apply(_basic_init)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)
        nn.init.zeros_(self.side_interpolator.attn.proj.weight)
        nn.init.zeros_(self.side_interpolator.attn.proj.bias)

    def _check(self, y_cat: torch.Tensor, c: torch.Tensor) -> None:
        cfg = self.config
        want = (cfg.in_channels, cfg.latent_size, cfg.latent_size)
        if y_cat.dim() != 4 or tuple(y_cat.shape[1:]) != want:
            raise ShapeError(f"expected y_cat (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(y_cat.shape)}")
        if c.dim() != 2 or c.shape != (y_cat.shape[0], cfg.width):
            raise ShapeError(f"condition must be (B, {cfg.width}), got {tuple(c.shape)}")

    def embed(self, y_cat: torch.Tensor) -> torch.Tensor:
        tokens = patchify(y_cat, self.config.patch)
        return self.x_embedder(tokens) + self.pos_embed.to(tokens.dtype)

    def conditioning(self, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.t_embedder(t) + c

    def _head(self, x, cond):
        cfg = self.config
        out = self.final_layer(x, cond)
        return unpatchify(out, cfg.patch, cfg.latent_channels, cfg.latent_size, cfg.latent_size)

    def forward_full(self, y_cat: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        self._check(y_cat, c)
        x = self.embed(y_cat)
        cond = self.conditioning(t, c)
        for block in self.blocks:
            x = block(x, cond)
        return self._head(x, cond)

    def forward_masked(
        self,
        y_cat: torch.Tensor,
        t: torch.Tensor,
        c: torch.Tensor,
        ratio: float = 0.3,
        generator: torch.Generator | None = None,
        return_spec: bool = False,
    ):
        self._check(y_cat, c)
        cfg = self.config
        x = self.embed(y_cat)
        cond = self.conditioning(t, c)
        kept, spec = mask_tokens(x, ratio, generator)
        self.last_encoder_length = kept.shape[1]
        for block in self.blocks[:cfg.encoder_depth]:
            kept = block(kept, cond)
        x = self.side_interpolate(kept, spec)
        for block in self.blocks[cfg.encoder_depth:]:
            x = block(x, cond)
        eps = self._head(x, cond)
        return (eps, spec) if return_spec else eps

    def restore_length(self, kept: torch.Tensor, spec: MaskSpec) -> torch.Tensor:
        """Full-length sequence: kept tokens in place, mask token + position elsewhere."""
        b, _, d = kept.shape
        fill = (self.mask_token + self.pos_embed).to(kept.dtype).expand(b, -1, -1)
        idx = spec.kept.to(kept.device)[..., None].expand(-1, -1, d)
        return torch.scatter(fill, 1, idx, kept)

    def side_interpolate(self, kept: torch.Tensor, spec: MaskSpec, return_weights: bool = False):
        return self.side_interpolator(self.restore_length(kept, spec), return_weights=return_weights)

    def forward(self, y_cat, t, c, mask_ratio: float | None = None, generator=None):
        if mask_ratio is None:
            return self.forward_full(y_cat, t, c)
        return self.forward_masked(y_cat, t, c, mask_ratio, generator)


def count_params(config: ModelConfig) -> dict[str, int]:
    """Analytic parameter count of :class:`MaskedDenoiser`, itemised by sub-module."""
    config.validate()
    d, p = config.width, config.patch
    hidden = int(d * config.mlp_ratio)
    attn = (d * 3 * d + 3 * d) + (d * d + d)
    mlp = (d * hidden + hidden) + (hidden * d + d)
    ada = d * 6 * d + 6 * d
    items = {
        "patch_embed": config.in_channels * p * p * d + d,
        "timestep_embed": (config.freq_dim * d + d) + (d * d + d),
        "blocks": config.depth * (attn + mlp + ada),
        "side_interpolator": attn,
        "mask_token": d,
        "final_layer": (d * 2 * d + 2 * d) + (d * p * p * config.latent_channels + p * p * config.latent_channels),
    }
    items["total"] = sum(items.values())
    return items


def build_denoiser(config: ModelConfig, seed: int = 0) -> MaskedDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MaskedDenoiser(config)
