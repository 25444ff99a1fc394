"""DDIM sampling with classifier-free guidance, plus optional color/sharpness post-processing."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .codec import image_to_tensor, tensor_to_image
from .diffusion.model import FuturePredictor
from .diffusion.schedule import NoiseSchedule, predict_x0

# Image conditioning is never dropped, so image guidance is fixed at 1.
IMAGE_GUIDANCE_SCALE = 1.0
UNSHARP_STRENGTH = 0.3


@dataclass
class SamplerConfig:
    num_steps: int = 100
    guidance: float = 1.5
    eta: float = 0.0
    seed: int = 0
    post_process: bool = False

    def validate(self, num_timesteps: int) -> None:
        if not 1 <= self.num_steps <= num_timesteps:
            raise ValueError(f"num_steps must be in [1, {num_timesteps}], got {self.num_steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not np.isfinite(self.guidance) or self.guidance < 0:
            raise ValueError(f"guidance weight must be finite and >= 0, got {self.guidance}")

    def to_dict(self) -> dict:
        return dict(asdict(self), image_guidance=IMAGE_GUIDANCE_SCALE)


def guided_eps(eps_cond: Tensor, eps_uncond: Tensor, w: float) -> Tensor:
    """Classifier-free guidance blend ``w * eps_cond + (1 - w) * eps_uncond``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return w * eps_cond + (1.0 - w) * eps_uncond


def timestep_sequence(num_timesteps: int, num_steps: int) -> list[int]:
    """Uniformly spaced timesteps, descending, e.g. [1000, 990, ..., 10] for (1000, 100)."""
    ts = {int(round((i + 1) * num_timesteps / num_steps)) for i in range(num_steps)}
    return sorted(ts, reverse=True)


def ddim_step(schedule: NoiseSchedule, z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int,
              eta: float = 0.0, noise: Tensor | None = None) -> Tensor:
    """Move from timestep ``t`` to ``t_prev`` (``alpha_bar_0 = 1`` so ``t_prev = 0`` is clean)."""
    if not t > t_prev >= 0 or t > schedule.num_timesteps:
        raise ValueError(f"invalid DDIM timestep pair t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev]
    z0_hat = predict_x0(schedule, z_t, t, eps_hat)
    sigma = eta * torch.sqrt((1 - ab_prev) / (1 - ab_t)) * torch.sqrt(1 - ab_t / ab_prev)
    dir_coef = torch.sqrt(torch.clamp(1 - ab_prev - sigma ** 2, min=0.0))
    out = ab_prev.sqrt().to(z_t.dtype) * z0_hat + dir_coef.to(z_t.dtype) * eps_hat
    if eta > 0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        out = out + sigma.to(z_t.dtype) * noise
    return out


EpsFn = Callable[[Tensor, int], Tensor]


def ddim_sample(schedule: NoiseSchedule, eps_fn: EpsFn, z_start: Tensor, num_steps: int,
                eta: float = 0.0, generator: torch.Generator | None = None) -> Tensor:
    """Run DDIM from ``z_start`` at ``t = T`` down to a clean latent using ``eps_fn(z, t)``."""
    ts = timestep_sequence(schedule.num_timesteps, num_steps)
    z = z_start
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        noise = None
        if eta > 0:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        z = ddim_step(schedule, z, eps_fn(z, t), t, t_prev, eta, noise)
    return z


def sample_seed(seed: int, key: str) -> int:
    """Per-sample RNG seed derived from a run seed and a sample key."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@torch.no_grad()
def predict_latents(model: FuturePredictor, inputs: Tensor, instructions: Sequence[str],
                    config: SamplerConfig, keys: Sequence[str] | None = None) -> Tensor:
    """Batched guided DDIM. ``keys`` name the per-sample RNG streams (default: batch index)."""
    config.validate(model.schedule.num_timesteps)
    b, _, h, w = inputs.shape
    model.check_resolution(h, w)
    keys = list(keys) if keys is not None else [str(i) for i in range(b)]
    z_cond = model.codec.encode(inputs)
    gens = [torch.Generator().manual_seed(sample_seed(config.seed, k)) for k in keys]
    z = torch.stack([torch.randn(z_cond.shape[1:], generator=g, dtype=z_cond.dtype) for g in gens])
    cond_ids = model.batch_ids(instructions)
    null_ids = model.text.null_ids(b)

    def eps_fn(z_t: Tensor, t: int) -> Tensor:
        tt = torch.full((b,), t, dtype=torch.long)
        e_c = model.denoise_eps(z_t, z_cond, tt, cond_ids)
        if config.guidance == 1.0:
            return e_c
        e_u = model.denoise_eps(z_t, z_cond, tt, null_ids)
        return guided_eps(e_c, e_u, config.guidance)

    ts = timestep_sequence(model.schedule.num_timesteps, config.num_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        noise = None
        if config.eta > 0:
            noise = torch.stack([torch.randn(z.shape[1:], generator=g, dtype=z.dtype) for g in gens])
        z = ddim_step(model.schedule, z, eps_fn(z, t), t, t_prev, config.eta, noise)
    return z


@torch.no_grad()
def predict_batch(model: FuturePredictor, images: Sequence[np.ndarray],
                  instructions: Sequence[str], config: SamplerConfig,
                  keys: Sequence[str] | None = None) -> list[np.ndarray]:
    """Predict future frames for a batch of H x W x 3 images in [0, 1]."""
    model.eval()
    inputs = torch.stack([image_to_tensor(im) for im in images])
    z = predict_latents(model, inputs, instructions, config, keys)
    decoded = model.codec.decode(z)
    out = [tensor_to_image(d) for d in decoded]
    if config.post_process:
        out = [post_process(o, ref) for o, ref in zip(out, images)]
    return out


def predict_future_frame(model: FuturePredictor, image: np.ndarray, instruction: str,
                         config: SamplerConfig | None = None, key: str = "0") -> np.ndarray:
    """Predict the frame ``delta_t`` steps after ``image`` under ``instruction``."""
    return predict_batch(model, [image], [instruction], config or SamplerConfig(), [key])[0]


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    return sum(padded[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def post_process(image: np.ndarray, reference: np.ndarray,
                 strength: float = UNSHARP_STRENGTH) -> np.ndarray:
    """Per-channel mean/std color balance toward ``reference``, then a 3x3 unsharp mask.

    Not idempotent: a second application sharpens again.
    """
    img = np.asarray(image, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    balanced = np.empty_like(img)
    for c in range(img.shape[2]):
        mu, sd = img[..., c].mean(), img[..., c].std()
        mu_r, sd_r = ref[..., c].mean(), ref[..., c].std()
        if sd > 1e-12:
            balanced[..., c] = (img[..., c] - mu) * (sd_r / sd) + mu_r
        else:
            balanced[..., c] = mu_r
    sharp = balanced + strength * (balanced - _box_blur3(balanced))
    return np.clip(sharp, 0.0, 1.0).astype(np.float32)
