"""Joint full + masked denoising training with condition dropout and EMA."""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ccnet import CCNetConfig, ConditionsCollector, drop_condition
from .codec import Codec, CodecConfig, build_codec, codec_from_dict, codec_to_dict, fit_codec, freeze
from .config import config_hash, flatten, apply_overrides
from .data import SceneSample, to_model_range
from .diffusion import NoiseSchedule, concat_hint, q_sample
from .errors import LoadError, NumericError, ParameterError, ShapeError
from .features import ExtractorConfig, TokenExtractor, build_extractor, extract_tokens
from .transformer import MaskedDenoiser, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "objcompose-train/1"
# run-length and bookkeeping keys do not change the optimisation trajectory
_HASH_EXCLUDE = ("steps", "ckpt_every", "log_every")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 3000
    mask_ratio: float = 0.3
    mask_weight: float = 1.0
    cond_dropout: float = 0.1
    ema_decay: float = 0.995
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ckpt_every: int = 1000
    log_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def validate(self) -> None:
        if self.mask_weight < 0:
            raise ParameterError("mask_weight (lambda) must be >= 0")
        if not 0 <= self.cond_dropout <= 1:
            raise ParameterError("cond_dropout (eta) must lie in [0, 1]")
        if not 0 < self.ema_decay < 1:
            raise ParameterError("ema_decay must lie in (0, 1)")
        if not 0 <= self.mask_ratio < 1:
            raise ParameterError("mask_ratio must lie in [0, 1)")
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ParameterError("lr >= 0, batch_size >= 1 and steps >= 0 required")
        self.model.validate()
        self.codec.validate()
        if self.codec.image_size != self.extractor.image_size:
            raise ParameterError("codec and extractor image sizes differ")
        if self.codec.image_size // self.codec.factor != self.model.latent_size:
            raise ParameterError(
                f"latent size {self.model.latent_size} != image_size/factor "
                f"{self.codec.image_size // self.codec.factor}"
            )

    def ccnet_config(self) -> CCNetConfig:
        n = self.extractor.num_tokens
        return CCNetConfig(
            width=self.model.width,
            feat_width=self.extractor.width,
            latent_size=self.model.latent_size,
            latent_channels=self.model.latent_channels,
            patch=self.model.patch,
            box_tokens=n,
            source_tokens=n,
            hint_tokens=n,
        )

    def hash(self) -> str:
        return config_hash(self, exclude=_HASH_EXCLUDE)


class Customizer(nn.Module):
    """The trainable pair: conditions collector + masked denoiser."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.ccnet = ConditionsCollector(config.ccnet_config())
        self.denoiser = MaskedDenoiser(config.model)

    def condition(self, batch: "LatentBatch") -> torch.Tensor:
        return self.ccnet(batch.source, batch.box_tokens, batch.source_tokens, batch.hint_tokens)

    def forward_full(self, y_cat, t, c):
        return self.denoiser.forward_full(y_cat, t, c)


def build_customizer(config: TrainConfig) -> Customizer:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return Customizer(config)


# --------------------------------------------------------------------------
# frozen preprocessing


@dataclass
class LatentBatch:
    """Codec latents and extractor tokens for a set of scenes (frozen inputs)."""

    target: torch.Tensor
    hint: torch.Tensor
    source: torch.Tensor
    box_tokens: torch.Tensor
    source_tokens: torch.Tensor
    hint_tokens: torch.Tensor

    def __len__(self) -> int:
        return self.target.shape[0]

    def select(self, idx) -> "LatentBatch":
        return LatentBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def to(self, dtype) -> "LatentBatch":
        return LatentBatch(*(getattr(self, f).to(dtype) for f in self.__dataclass_fields__))


def images_to_tensor(images) -> torch.Tensor:
    """List of HWC [0, 1] arrays -> (N, 3, H, W) float32 in [-1, 1]."""
    arr = to_model_range(np.stack(images).astype(np.float32)).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


@torch.no_grad()
def prepare_batch(samples, codec: Codec, extractor: TokenExtractor, chunk: int = 128) -> LatentBatch:
    parts = []
    samples = list(samples)
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        tgt = images_to_tensor([s.target_image for s in part])
        hnt = images_to_tensor([s.hint_image for s in part])
        src = images_to_tensor([s.source_image for s in part])
        box = images_to_tensor([s.box_viz for s in part])
        parts.append(LatentBatch(
            target=codec.encode(tgt), hint=codec.encode(hnt), source=codec.encode(src),
            box_tokens=extract_tokens(box, extractor),
            source_tokens=extract_tokens(src, extractor),
            hint_tokens=extract_tokens(hnt, extractor),
        ))
    return LatentBatch(*(torch.cat([getattr(p, f) for p in parts]) for f in LatentBatch.__dataclass_fields__))


# --------------------------------------------------------------------------
# losses and updates


class LossTerms(NamedTuple):
    join: torch.Tensor
    denoising: torch.Tensor
    denoising_mask: torch.Tensor


def compute_joint_loss(
    batch: LatentBatch,
    net: Customizer,
    schedule: NoiseSchedule,
    config: TrainConfig,
    generator: torch.Generator,
) -> LossTerms:
    """L_join = L_denoising + lambda * L_denoising_mask on one shared (t, eps) draw."""
    b = len(batch)
    y0 = batch.target
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(y0.shape, generator=generator, dtype=y0.dtype)
    y_t = q_sample(y0, t, eps, schedule)
    c, _ = drop_condition(net.condition(batch), config.cond_dropout, generator)
    y_cat = concat_hint(batch.hint, y_t)

    l_full = F.mse_loss(net.denoiser.forward_full(y_cat, t, c), eps)
    eps_m = net.denoiser.forward_masked(y_cat, t, c, config.mask_ratio, generator)
    l_mask = F.mse_loss(eps_m, eps)
    l_join = l_full + config.mask_weight * l_mask
    if not all(torch.isfinite(v) for v in (l_join, l_full, l_mask)):
        raise NumericError(
            f"non-finite loss: L_join={l_join.item()} L_denoising={l_full.item()} "
            f"L_denoising_mask={l_mask.item()} t={t.tolist()}"
        )
    return LossTerms(l_join, l_full, l_mask)


@torch.no_grad()
def ema_update(ema, weights, decay: float):
    """ema <- decay * ema + (1 - decay) * weights, in place; modules or tensor lists."""
    if isinstance(ema, nn.Module):
        ema, weights = list(ema.parameters()), list(weights.parameters())
    if len(ema) != len(weights):
        raise ShapeError("EMA and weights hold different numbers of tensors")
    for e, w in zip(ema, weights):
        if e.shape != w.shape:
            raise ShapeError(f"EMA tensor {tuple(e.shape)} vs weights {tuple(w.shape)}")
        # lerp keeps decay=1 and ema==weights exact fixed points
        e.lerp_(w, 1.0 - decay)
    return ema


@dataclass
class TrainState:
    config: TrainConfig
    codec: Codec
    extractor: TokenExtractor
    net: Customizer
    ema: Customizer
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    generator: torch.Generator
    step: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, codec: Codec | None = None) -> TrainState:
    config.validate()
    codec = freeze(codec) if codec is not None else build_codec(config.codec)
    net = build_customizer(config)
    ema = copy.deepcopy(net)
    for p in ema.parameters():
        p.requires_grad_(False)
    # plain Adam, default betas, no weight decay
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    return TrainState(
        config=config,
        codec=codec,
        extractor=build_extractor(config.extractor),
        net=net,
        ema=ema,
        optimizer=opt,
        schedule=NoiseSchedule.linear(config.T, config.beta_start, config.beta_end),
        generator=torch.Generator().manual_seed(config.seed),
    )


def train_step(state: TrainState, batch: LatentBatch) -> TrainState:
    state.net.train()
    terms = compute_joint_loss(batch, state.net, state.schedule, state.config, state.generator)
    state.optimizer.zero_grad(set_to_none=True)
    terms.join.backward()
    state.optimizer.step()
    ema_update(state.ema, state.net, state.config.ema_decay)
    state.step += 1
    state.history.append((state.step, terms.join.item(), terms.denoising.item(), terms.denoising_mask.item()))
    return state


def draw_batch(state: TrainState, data: LatentBatch) -> LatentBatch:
    idx = torch.randint(len(data), (state.config.batch_size,), generator=state.generator)
    return data.select(idx)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "config": flatten(state.config),
        "config_hash": state.config.hash(),
        "net": state.net.state_dict(),
        "ema": state.ema.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "history": list(state.history),
        "rng": state.generator.get_state(),
        "codec": codec_to_dict(state.codec),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a training state; ``config`` (if given) must hash-match the stored one."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not a training checkpoint")
    stored = apply_overrides(TrainConfig(), blob["config"])
    if stored.hash() != blob["config_hash"]:
        raise LoadError(f"{path}: stored config does not match its hash")
    if config is not None and config.hash() != blob["config_hash"]:
        raise LoadError(
            f"config hash mismatch: checkpoint {blob['config_hash']} vs run {config.hash()}"
        )
    run_config = config or stored
    state = init_state(run_config, codec=codec_from_dict(blob["codec"]))
    state.net.load_state_dict(blob["net"])
    state.ema.load_state_dict(blob["ema"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.generator.set_state(blob["rng"])
    state.step = int(blob["step"])
    state.history = [tuple(h) for h in blob["history"]]
    return state


# --------------------------------------------------------------------------
# loop


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _append_log(path: Path, rows) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "L_join", "L_denoising", "L_denoising_mask"])
        for r in rows:
            w.writerow([r[0], *(f"{x:.8g}" for x in r[1:])])


def fit_data_codec(config: TrainConfig, samples) -> Codec:
    imgs = images_to_tensor([s.target_image for s in samples] + [s.source_image for s in samples])
    return fit_codec(imgs, config.codec)


def train(
    config: TrainConfig,
    samples: list[SceneSample] | None = None,
    out_dir=None,
    state: TrainState | None = None,
    data: LatentBatch | None = None,
    codec: Codec | None = None,
    callback: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run (or resume) training until ``config.steps``.

    Without an explicit ``codec`` one is fitted on ``samples`` (for block
    codecs this only sets the latent scale).

    Writes ``loss.csv``, ``ckpt_step{N}.pt`` every ``ckpt_every`` steps
    (including step 0) and ``last.pt`` into ``out_dir`` when given.
    """
    if state is None:
        if codec is None and samples is not None:
            codec = fit_data_codec(config, samples)
        state = init_state(config, codec=codec)
    if data is None:
        if samples is None:
            raise ParameterError("train needs samples or prepared data")
        data = prepare_batch(samples, state.codec, state.extractor)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.step == 0:
            save_checkpoint(state, out / "ckpt_step0.pt")

    pending = []
    while state.step < config.steps:
        train_step(state, draw_batch(state, data))
        pending.append(state.history[-1])
        if config.log_every and state.step % config.log_every == 0:
            recent = np.mean([h[1] for h in state.history[-config.log_every:]])
            log.info("step %d  L_join %.4f", state.step, recent)
        if out is not None and config.ckpt_every and state.step % config.ckpt_every == 0:
            _append_log(out / "loss.csv", pending)
            pending = []
            save_checkpoint(state, out / f"ckpt_step{state.step}.pt")
        if callback is not None:
            callback(state)
    if out is not None:
        _append_log(out / "loss.csv", pending)
        save_checkpoint(state, out / "last.pt")
    return state
