"""Composite training objective: weighted diffusion, perceptual and adversarial terms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import DivergenceError
from .model import FuturePredictor
from .schedule import forward_noise, predict_x0


@dataclass
class LossWeights:
    diff: float = 1.0
    perc: float = 0.1
    adv: float = 0.01

    def __post_init__(self):
        if min(self.diff, self.perc, self.adv) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class PerceptualFeatures(nn.Module):
    """Frozen, randomly initialized 4-layer conv stack used as a perceptual feature space."""

    def __init__(self, widths: Sequence[int] = (16, 32, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, images: Tensor) -> list[Tensor]:
        feats = []
        h = images * 2.0 - 1.0
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        """Sum over layers of the mean squared feature difference."""
        return sum(F.mse_loss(fa, fb) for fa, fb in zip(self(a), self(b)))


class PatchDiscriminator(nn.Module):
    """Strided-conv patch discriminator returning a map of real/fake logits."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, images: Tensor) -> Tensor:
        return self.net(images * 2.0 - 1.0)


def generator_adv_loss(disc: PatchDiscriminator, fake: Tensor) -> Tensor:
    """Non-saturating generator loss ``-log D(fake)``."""
    return F.softplus(-disc(fake)).mean()


def discriminator_loss(disc: PatchDiscriminator, real: Tensor, fake: Tensor) -> Tensor:
    if real.shape != fake.shape:
        raise ValueError(f"real batch {tuple(real.shape)} and fake batch {tuple(fake.shape)} differ")
    return F.softplus(-disc(real)).mean() + F.softplus(disc(fake)).mean()


def discriminator_step(disc: PatchDiscriminator, optimizer: torch.optim.Optimizer,
                       real: Tensor, fake: Tensor) -> float:
    """One update of the discriminator only; ``fake`` is detached from its generator."""
    optimizer.zero_grad(set_to_none=True)
    loss = discriminator_loss(disc, real, fake.detach())
    loss.backward()
    optimizer.step()
    return loss.item()


@dataclass
class LossOutput:
    total: Tensor
    diff: Tensor
    perc: Tensor
    adv: Tensor
    prediction: Tensor  # decoded one-step estimate of the target frame

    def components(self) -> dict[str, float]:
        return {"loss_total": self.total.item(), "loss_diff": self.diff.item(),
                "loss_perc": self.perc.item(), "loss_adv": self.adv.item()}


def composite_loss(model: FuturePredictor, inputs: Tensor, targets: Tensor,
                   instructions: Sequence[str], weights: LossWeights,
                   features: PerceptualFeatures, disc: PatchDiscriminator, *,
                   t: Tensor | None = None, noise: Tensor | None = None,
                   drop: Sequence[bool] | None = None, cond_dropout: float = 0.0,
                   generator: torch.Generator | None = None) -> LossOutput:
    """Weighted sum of the noise-prediction MSE, a perceptual distance and an adversarial term.

    The perceptual and adversarial terms are evaluated on ``decode(z0_hat)``, where
    ``z0_hat`` is the one-step clean-latent estimate implied by the predicted noise. ``t``,
    ``noise`` and ``drop`` may be passed explicitly; otherwise they are drawn from
    ``generator`` (text conditions are dropped to null with probability ``cond_dropout``).
    """
    b = inputs.shape[0]
    sched = model.schedule
    z_cond = model.codec.encode(inputs)
    with torch.no_grad():
        z0 = model.codec.encode(targets)
    if t is None:
        t = torch.randint(1, sched.num_timesteps + 1, (b,), generator=generator)
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    if drop is None:
        drop = (torch.rand(b, generator=generator) < cond_dropout).tolist()
    z_t = forward_noise(sched, z0, t, noise)
    eps_hat = model.denoise_eps(z_t, z_cond, t, model.batch_ids(instructions, drop))

    l_diff = F.mse_loss(eps_hat, noise)
    pred = model.codec.decode(predict_x0(sched, z_t, t, eps_hat))
    l_perc = features.distance(pred, targets)
    l_adv = generator_adv_loss(disc, pred)
    total = weights.diff * l_diff + weights.perc * l_perc + weights.adv * l_adv
    if not torch.isfinite(total):
        comps = {"loss_diff": l_diff.item(), "loss_perc": l_perc.item(), "loss_adv": l_adv.item()}
        raise DivergenceError(f"non-finite training loss: {comps}", comps)
    return LossOutput(total, l_diff, l_perc, l_adv, pred)
