"""Frozen pixel <-> latent codecs.

Two modes share one interface.  ``block`` maps every ``f x f x 3`` pixel
block to 4 values through a fixed orthonormal linear map (decode is its
transpose), so blocks never mix.  ``learned`` is a small strided
convolutional autoencoder fitted by reconstruction MSE.

Latents are divided by a scalar ``scale`` so that they have unit variance on
the fitting set; ``decode`` multiplies it back.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, LoadError, ParameterError, ShapeError

LATENT_CHANNELS = 4
CODEC_FORMAT = "objcompose-codec/1"


@dataclass
class CodecConfig:
    mode: str = "block"
    image_size: int = 64
    factor: int = 4
    seed: int = 0
    hidden: int = 32
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3

    def validate(self) -> None:
        if self.mode not in ("block", "learned"):
            raise ParameterError(f"unknown codec mode {self.mode!r}")
        if self.image_size % self.factor:
            raise ParameterError(f"image_size {self.image_size} not divisible by factor {self.factor}")
        if self.mode == "learned" and self.factor != 4:
            raise ParameterError("learned codec supports factor 4 only")


class Codec(nn.Module):
    """Common surface: ``encode``/``decode`` on NCHW tensors in [-1, 1]."""

    mode = "base"

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.register_buffer("scale", torch.ones((), dtype=torch.float64))
        self.history: list[float] = []

    @property
    def factor(self) -> int:
        return self.config.factor

    def _check_image(self, x: torch.Tensor) -> None:
        s = self.config.image_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"expected images (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def _check_latent(self, z: torch.Tensor) -> None:
        n = self.config.image_size // self.factor
        if z.dim() != 4 or z.shape[1] != LATENT_CHANNELS or z.shape[2] != n or z.shape[3] != n:
            raise ShapeError(f"expected latents (B, {LATENT_CHANNELS}, {n}, {n}), got {tuple(z.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self._encode(x) / self.scale.to(x.dtype)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        return self._decode(z * self.scale.to(z.dtype))

    def _encode(self, x):
        raise NotImplementedError

    def _decode(self, z):
        raise NotImplementedError


def block_basis(factor: int, seed: int) -> torch.Tensor:
    """Orthonormal (4, 3 f^2) basis whose first three rows are channel block means.

    Keeping the per-channel DC directions in the row space makes any image
    that is constant on each block reconstruct exactly.  The fourth row is a
    seeded random direction orthogonalised against them.
    """
    n = 3 * factor * factor
    dc = np.zeros((3, n))
    # pixel layout inside a block is (c, dy, dx), matching F.unfold
    for c in range(3):
        dc[c, c * factor * factor:(c + 1) * factor * factor] = 1.0
    extra = np.random.default_rng(seed).normal(size=(1, n))
    q, _ = np.linalg.qr(np.concatenate([dc, extra]).T)
    q = q.T
    # QR may flip signs; keep DC rows positive so latents read as brightness
    for c in range(3):
        if q[c] @ dc[c] < 0:
            q[c] = -q[c]
    return torch.from_numpy(q)


class BlockCodec(Codec):
    mode = "block"

    def __init__(self, config: CodecConfig):
        super().__init__(config)
        self.register_buffer("basis", block_basis(config.factor, config.seed).float())

    def _encode(self, x):
        f = self.factor
        b, _, h, w = x.shape
        cols = F.unfold(x, kernel_size=f, stride=f)  # (B, 3 f^2, L)
        z = self.basis.to(x.dtype) @ cols
        return z.reshape(b, LATENT_CHANNELS, h // f, w // f)

    def _decode(self, z):
        f = self.factor
        b, _, h, w = z.shape
        cols = self.basis.to(z.dtype).T @ z.reshape(b, LATENT_CHANNELS, h * w)
        return F.fold(cols, output_size=(h * f, w * f), kernel_size=f, stride=f)


# (kernel, stride) of every encoder conv, used for the receptive field
_ENCODER_LAYOUT = ((3, 1), (4, 2), (3, 1), (4, 2), (3, 1), (1, 1))


class ConvCodec(Codec):
    mode = "learned"

    def __init__(self, config: CodecConfig):
        super().__init__(config)
        h = config.hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(3, h, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(h, h, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(h, h, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(h, h, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(h, h, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(h, LATENT_CHANNELS, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, h, 3, 1, 1), nn.SiLU(),
            nn.ConvTranspose2d(h, h, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(h, h, 3, 1, 1), nn.SiLU(),
            nn.ConvTranspose2d(h, h, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(h, 3, 3, 1, 1),
        )

    @staticmethod
    def receptive_field() -> int:
        r, jump = 1, 1
        for k, s in _ENCODER_LAYOUT:
            r += (k - 1) * jump
            jump *= s
        return r

    def _encode(self, x):
        return self.encoder(x)

    def _decode(self, z):
        return self.decoder(z)


def build_codec(config: CodecConfig) -> Codec:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        codec = BlockCodec(config) if config.mode == "block" else ConvCodec(config)
    return codec


def encode(image: torch.Tensor, codec: Codec) -> torch.Tensor:
    return codec.encode(image)


def decode(latent: torch.Tensor, codec: Codec) -> torch.Tensor:
    return codec.decode(latent)


def freeze(codec: Codec) -> Codec:
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec


@torch.no_grad()
def _latent_scale(codec: Codec, images: torch.Tensor, batch: int = 256) -> float:
    zs = [codec._encode(images[i:i + batch]) for i in range(0, len(images), batch)]
    std = torch.cat(zs).double().std().item()
    return std if std > 0 else 1.0


def fit_codec(images, config: CodecConfig, seed: int | None = None) -> Codec:
    """Fit a codec on ``images`` (N, 3, H, W) in [-1, 1] or a dataset directory.

    Block mode only estimates the latent scale.  Learned mode runs
    ``config.steps`` Adam steps on reconstruction MSE with cosine decay; the
    per-step training loss is kept in ``codec.history``.
    """
    if isinstance(images, (str, os.PathLike)):
        images = dataset_images(images)
    if len(images) == 0:
        raise DataError("cannot fit a codec on an empty dataset")
    if seed is not None:
        config = CodecConfig(**{**asdict(config), "seed": seed})
    codec = build_codec(config)
    images = images.float()

    if codec.mode == "learned":
        gen = torch.Generator().manual_seed(config.seed)
        opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
        codec.train()
        for _ in range(config.steps):
            idx = torch.randint(len(images), (config.batch_size,), generator=gen)
            x = images[idx]
            loss = F.mse_loss(codec._decode(codec._encode(x)), x)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            codec.history.append(loss.item())

    codec.scale.fill_(_latent_scale(codec, images))
    return freeze(codec)


def dataset_images(directory, fields: Sequence[str] = ("target", "source")) -> torch.Tensor:
    from .data import load_dataset, to_model_range

    _, store = load_dataset(directory)
    imgs = []
    for s in store:
        for name in fields:
            imgs.append(getattr(s, f"{name}_image"))
    if not imgs:
        return torch.empty(0, 3, 1, 1)
    arr = to_model_range(np.stack(imgs)).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def codec_to_dict(codec: Codec) -> dict:
    return {
        "format": CODEC_FORMAT,
        "mode": codec.mode,
        "config": asdict(codec.config),
        "state": {k: v.clone() for k, v in codec.state_dict().items()},
        "history": list(codec.history),
    }


def codec_from_dict(blob: dict) -> Codec:
    if not isinstance(blob, dict) or blob.get("format") != CODEC_FORMAT:
        raise LoadError("not a codec checkpoint")
    config = CodecConfig(**blob["config"])
    if config.mode != blob["mode"]:
        raise LoadError(f"codec mode tag {blob['mode']!r} disagrees with config")
    codec = build_codec(config)
    codec.load_state_dict(blob["state"])
    codec.history = list(blob.get("history", []))
    return freeze(codec)


def save_codec(codec: Codec, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(codec_to_dict(codec), tmp)
    os.replace(tmp, path)


def load_codec(path) -> Codec:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types on corrupt files
        raise LoadError(f"cannot read codec {path}: {exc}") from None
    return codec_from_dict(blob)


def outside_margin(box_latent, margin: int, n: int) -> np.ndarray:
    """Latent-cell mask of cells farther than ``margin`` cells from the box."""
    m = np.ones((n, n), dtype=bool)
    m[max(box_latent.y0 - margin, 0):box_latent.y1 + margin,
      max(box_latent.x0 - margin, 0):box_latent.x1 + margin] = False
    return m


def receptive_margin(codec: Codec) -> int:
    if codec.mode == "block":
        return 0
    return math.ceil(ConvCodec.receptive_field() / codec.factor)
