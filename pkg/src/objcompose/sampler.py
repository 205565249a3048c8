"""DDIM sampling with power-cosine scheduled classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, concat_hint
from .errors import ParameterError, ShapeError


def dynamic_beta(t, T: float, beta: float = 2.0, gamma: float = 0.01):
    """Guidance weight ``(1 - cos(pi (t/T)^gamma)) / 2 * beta``.

    Scalars give a float; arrays give an array.
    """
    if T <= 0:
        raise ParameterError(f"T must be positive, got {T}")
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    ratio = np.asarray(t, dtype=np.float64) / float(T)
    if np.any(ratio < 0) or np.any(ratio > 1):
        raise ParameterError(f"t must lie in [0, {T}]")
    out = (1.0 - np.cos(np.pi * ratio**gamma)) / 2.0 * beta
    return float(out) if out.ndim == 0 else out


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, beta_t) -> torch.Tensor:
    """beta_t * eps_cond + (1 - beta_t) * eps_uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"{tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return beta_t * eps_cond + (1.0 - beta_t) * eps_uncond


@dataclass
class SamplerSchedule:
    T: int = 1000
    ddim_steps: int = 50
    beta_max: float = 2.0
    gamma: float = 0.01
    eta_ddim: float = 0.0

    def validate(self) -> None:
        if self.ddim_steps < 1:
            raise ParameterError("ddim_steps must be >= 1")
        if self.ddim_steps > self.T:
            raise ParameterError(f"ddim_steps {self.ddim_steps} exceeds T={self.T}")
        if self.eta_ddim < 0:
            raise ParameterError("eta_ddim must be non-negative")

    def timesteps(self) -> np.ndarray:
        """Descending training timesteps ``T = t_0 > ... > t_S = 0`` on a uniform stride."""
        self.validate()
        return np.round(np.linspace(self.T, 0, self.ddim_steps + 1)).astype(np.int64)

    def guidance(self) -> np.ndarray:
        """beta_t at every denoising step (excludes the terminal t = 0)."""
        return dynamic_beta(self.timesteps()[:-1], self.T, self.beta_max, self.gamma)


def ddim_step(y_t, eps, ab_t: float, ab_s: float, sigma: float = 0.0, noise=None):
    """One DDIM move from timestep t to s < t given the noise estimate ``eps``."""
    x0 = (y_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    dir_coef = math.sqrt(max(1.0 - ab_s - sigma**2, 0.0))
    y_s = math.sqrt(ab_s) * x0 + dir_coef * eps
    if sigma > 0:
        y_s = y_s + sigma * noise
    return y_s


@torch.no_grad()
def ddim_sample(
    model,
    hint_latent: torch.Tensor,
    c: torch.Tensor,
    noise_schedule: NoiseSchedule,
    schedule: SamplerSchedule,
    seed: int = 0,
    y_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sample target latents for a batch of hints and conditions.

    ``model`` needs ``forward_full(y_cat, t, c)``.  The unconditional branch
    reuses it with ``c = 0``.
    """
    if schedule.T != noise_schedule.T:
        raise ParameterError(f"sampler T={schedule.T} but noise schedule T={noise_schedule.T}")
    steps = schedule.timesteps()
    betas = schedule.guidance()
    gen = torch.Generator().manual_seed(int(seed))
    if y_T is None:
        y_T = torch.randn(hint_latent.shape, generator=gen, dtype=hint_latent.dtype)
    y = y_T.to(hint_latent.device)
    zero = torch.zeros_like(c)
    ab = noise_schedule.alphas_cumprod
    b = hint_latent.shape[0]
    for i in range(len(steps) - 1):
        t, s = int(steps[i]), int(steps[i + 1])
        tt = torch.full((b,), t, dtype=torch.long, device=hint_latent.device)
        y_cat = concat_hint(hint_latent, y)
        eps_c = model.forward_full(y_cat, tt, c)
        eps_u = model.forward_full(y_cat, tt, zero)
        eps = cfg_combine(eps_c, eps_u, float(betas[i]))
        sigma, noise = 0.0, None
        if schedule.eta_ddim > 0 and s > 0:
            sigma = schedule.eta_ddim * math.sqrt((1 - ab[s]) / (1 - ab[t]) * (1 - ab[t] / ab[s]))
            noise = torch.randn(y.shape, generator=gen, dtype=y.dtype).to(y.device)
        y = ddim_step(y, eps, float(ab[t]), float(ab[s]), sigma, noise)
    return y
