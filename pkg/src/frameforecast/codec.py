"""Small convolutional autoencoder mapping RGB images to latent tensors and back.

Latents handed to the diffusion model are multiplied by a global ``latent_scale``
(fit with :meth:`LatentCodec.fit_latent_scale`) so their training-set standard
deviation is about 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DivergenceError

logger = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    latent_channels: int = 4
    downsample_factor: int = 4
    hidden: Sequence[int] = (32, 64)
    variational: bool = False
    kl_weight: float = 1e-6

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")
        if len(self.hidden) != self.num_downsamples:
            raise ValueError(f"hidden widths {tuple(self.hidden)} must have one entry per "
                             f"downsampling stage ({self.num_downsamples})")
        self.hidden = tuple(self.hidden)

    @property
    def num_downsamples(self) -> int:
        return int(math.log2(self.downsample_factor))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU())


class LatentCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config = config or CodecConfig()
        c = config.latent_channels
        widths = list(config.hidden)

        enc: list[nn.Module] = [_block(3, widths[0], 1)]
        prev = widths[0]
        for w in widths:
            enc.append(_block(prev, w, 2))
            enc.append(_block(w, w, 1))
            prev = w
        enc.append(nn.Conv2d(prev, 2 * c if config.variational else c, 3, padding=1))
        self.encoder = nn.ModuleList(enc)

        dec: list[nn.Module] = [_block(c, prev, 1)]
        for w in reversed(widths):
            dec.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                     nn.Conv2d(prev, w, 3, padding=1), nn.SiLU()))
            dec.append(_block(w, w, 1))
            prev = w
        dec.append(nn.Conv2d(prev, 3, 3, padding=1))
        self.decoder = nn.ModuleList(dec)

        self.register_buffer("latent_scale", torch.tensor(1.0))

    # -- shape checks

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.config.downsample_factor
        if height % f or width % f:
            raise ValueError(f"image size {height}x{width} must be divisible by the codec "
                             f"downsample factor {f}")
        return self.config.latent_channels, height // f, width // f

    def _moments(self, images: Tensor) -> tuple[Tensor, Tensor | None]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images shaped (B, 3, H, W), got {tuple(images.shape)}")
        self.latent_shape(images.shape[2], images.shape[3])
        h = images * 2.0 - 1.0
        for layer in self.encoder:
            h = layer(h)
        if self.config.variational:
            mean, logvar = h.chunk(2, dim=1)
            return mean, logvar.clamp(-30.0, 20.0)
        return h, None

    def encode_raw(self, images: Tensor) -> Tensor:
        return self._moments(images)[0]

    def decode_raw(self, latents: Tensor) -> Tensor:
        if latents.ndim != 4 or latents.shape[1] != self.config.latent_channels:
            raise ValueError(f"expected latents shaped (B, {self.config.latent_channels}, h, w), "
                             f"got {tuple(latents.shape)}")
        h = latents
        for layer in self.decoder:
            h = layer(h)
        return torch.sigmoid(h)

    def encode(self, images: Tensor) -> Tensor:
        """Deterministic, scaled latent (the encoder mean) of images in [0, 1]."""
        return self.encode_raw(images) * self.latent_scale

    def decode(self, latents: Tensor) -> Tensor:
        """Images in [0, 1] from scaled latents."""
        return self.decode_raw(latents / self.latent_scale)

    def reconstruction_loss(self, images: Tensor, generator: torch.Generator | None = None) -> Tensor:
        mean, logvar = self._moments(images)
        z = mean
        if logvar is not None:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            z = mean + torch.exp(0.5 * logvar) * noise
        loss = F.mse_loss(self.decode_raw(z), images)
        if logvar is not None:
            kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
            loss = loss + self.config.kl_weight * kl
        return loss

    @torch.no_grad()
    def fit_latent_scale(self, images: Tensor, batch_size: int = 64) -> float:
        """Set ``latent_scale`` to 1 / std of the raw latents of ``images``."""
        raws = [self.encode_raw(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        std = torch.cat(raws).std().item()
        scale = 1.0 / std if std > 1e-8 else 1.0
        self.latent_scale.fill_(scale)
        return scale


def image_to_tensor(image: np.ndarray) -> Tensor:
    """H x W x 3 array in [0, 1] -> (3, H, W) float tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def tensor_to_image(t: Tensor) -> np.ndarray:
    return t.detach().to(torch.float32).clamp(0, 1).permute(1, 2, 0).numpy().copy()


def train_codec(images: Tensor | Sequence[Tensor], config: CodecConfig | None = None,
                steps: int = 1000, *, codec: LatentCodec | None = None, lr: float = 1e-3,
                batch_size: int = 16, seed: int = 0) -> tuple[LatentCodec, list[float]]:
    """Fit a codec on images in [0, 1] by pixel MSE.

    ``images`` is one (N, 3, H, W) tensor or a list of them at different resolutions;
    each step draws a batch from one group, cycling through the groups. Returns the codec
    and the per-step loss history. With ``steps=0`` the initial weights are returned
    untouched.
    """
    groups = [images] if isinstance(images, Tensor) else list(images)
    if not groups or any(len(g) == 0 for g in groups):
        raise ValueError("train_codec needs at least one image")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if codec is None:
        torch.manual_seed(seed)
        codec = LatentCodec(config)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    history: list[float] = []
    codec.train()
    for step in range(steps):
        g = groups[step % len(groups)]
        idx = torch.randint(len(g), (min(batch_size, len(g)),), generator=gen)
        loss = codec.reconstruction_loss(g[idx], generator=gen)
        if not torch.isfinite(loss):
            raise DivergenceError(f"codec loss became non-finite at step {step}",
                                  {"reconstruction": loss.item()})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if step % 500 == 0:
            logger.debug("codec step %d loss %.5f", step, history[-1])
    codec.eval()
    return codec, history
