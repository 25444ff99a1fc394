from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule over timesteps ``1..T``.

    ``alpha_bars`` has length ``T + 1`` with ``alpha_bars[0] = 1`` so that ``t = 0``
    denotes clean data. All tables are float64.
    """

    num_timesteps: int
    beta_start: float
    beta_end: float
    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor

    def alpha_bar(self, t: int | Tensor) -> Tensor:
        return self.alpha_bars[t]

    def to_dict(self) -> dict:
        return {"num_timesteps": self.num_timesteps, "beta_start": self.beta_start,
                "beta_end": self.beta_end}


def make_schedule(num_timesteps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if num_timesteps < 2:
        raise ValueError(f"need at least 2 timesteps, got {num_timesteps}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(alphas, 0)])
    # Index 0 is a placeholder so betas[t] / alphas[t] line up with alpha_bars[t].
    pad = torch.zeros(1, dtype=torch.float64)
    return NoiseSchedule(num_timesteps, beta_start, beta_end,
                         torch.cat([pad, betas]), torch.cat([pad + 1.0, alphas]), alpha_bars)


def _broadcast(coef: Tensor, like: Tensor) -> Tensor:
    return coef.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def forward_noise(schedule: NoiseSchedule, z0: Tensor, t: int | Tensor, eps: Tensor) -> Tensor:
    """Sample ``q(z_t | z_0)`` as ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int or a (B,) tensor of timesteps in ``[1, T]``.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_t = torch.as_tensor(t, dtype=torch.long)
    if int(t_t.min()) < 1 or int(t_t.max()) > schedule.num_timesteps:
        raise ValueError(f"timestep out of range [1, {schedule.num_timesteps}]: {t}")
    ab = schedule.alpha_bars[t_t]
    if ab.ndim == 0:
        return ab.sqrt().to(z0.dtype) * z0 + (1.0 - ab).sqrt().to(z0.dtype) * eps
    return _broadcast(ab.sqrt(), z0) * z0 + _broadcast((1.0 - ab).sqrt(), z0) * eps


def predict_x0(schedule: NoiseSchedule, z_t: Tensor, t: int | Tensor, eps_hat: Tensor) -> Tensor:
    """One-step clean-latent estimate from a noise prediction."""
    ab = schedule.alpha_bars[torch.as_tensor(t, dtype=torch.long)]
    if ab.ndim == 0:
        return (z_t - (1.0 - ab).sqrt().to(z_t.dtype) * eps_hat) / ab.sqrt().to(z_t.dtype)
    return (z_t - _broadcast((1.0 - ab).sqrt(), z_t) * eps_hat) / _broadcast(ab.sqrt(), z_t)
