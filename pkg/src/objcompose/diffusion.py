"""Forward noising process and hint concatenation."""

from __future__ import annotations

import numpy as np
import torch

from .errors import ParameterError, ShapeError


class NoiseSchedule:
    """Discrete variance schedule with ``alpha_bar[0] = 1`` and T noisy steps.

    ``alpha_bar[t] = prod_{s=1..t} (1 - beta_s)`` for ``t = 0..T``.
    """

    def __init__(self, alphas_cumprod: np.ndarray):
        ab = np.asarray(alphas_cumprod, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ParameterError("alphas_cumprod needs at least two entries")
        if np.any(ab < 0) or np.any(ab > 1):
            raise ParameterError("alphas_cumprod must lie in [0, 1]")
        self.alphas_cumprod = ab
        self.T = len(ab) - 1

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if T < 1:
            raise ParameterError(f"T must be positive, got {T}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    def check_t(self, t) -> None:
        t = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ParameterError(f"timestep outside [0, {self.T}]")

    def alpha_bar(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        """alpha_bar at integer timesteps ``t`` as a tensor (dtype/device of ``like``)."""
        self.check_t(t)
        idx = t.cpu().long().numpy() if torch.is_tensor(t) else np.asarray(t, dtype=np.int64)
        out = torch.from_numpy(self.alphas_cumprod[idx])
        if like is not None:
            out = out.to(dtype=like.dtype, device=like.device)
        return out


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """y_t = sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) eps, per batch element."""
    if eps.shape != y0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(y0.shape)}")
    if not torch.is_tensor(t):
        t = torch.full((y0.shape[0],), int(t), dtype=torch.long)
    ab = schedule.alpha_bar(t, like=y0).reshape(-1, *([1] * (y0.dim() - 1)))
    return ab.sqrt() * y0 + (1 - ab).sqrt() * eps


def concat_hint(hint: torch.Tensor, y_t: torch.Tensor) -> torch.Tensor:
    """Stack ``[hint, y_t]`` on the channel axis."""
    if hint.shape[0] != y_t.shape[0] or hint.shape[2:] != y_t.shape[2:]:
        raise ShapeError(f"hint {tuple(hint.shape)} and noisy latent {tuple(y_t.shape)} disagree")
    return torch.cat([hint, y_t], dim=1)
