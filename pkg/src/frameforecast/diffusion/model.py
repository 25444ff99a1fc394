from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from ..codec import CodecConfig, LatentCodec
from ..text import TextConditioner, Vocabulary
from .schedule import NoiseSchedule, make_schedule
from .unet import ConditionalUNet, DenoiserConfig


class FuturePredictor(nn.Module):
    """Codec + instruction embedder + conditional U-Net, sharing one noise schedule."""

    def __init__(self, vocab: Vocabulary, codec_config: CodecConfig | None = None,
                 denoiser_config: DenoiserConfig | None = None,
                 schedule: NoiseSchedule | None = None, codec: LatentCodec | None = None):
        super().__init__()
        denoiser_config = denoiser_config or DenoiserConfig()
        codec_config = codec.config if codec is not None else (codec_config or CodecConfig())
        if codec_config.latent_channels != denoiser_config.latent_channels:
            raise ValueError("codec and denoiser disagree on latent channels")
        self.codec = codec if codec is not None else LatentCodec(codec_config)
        self.text = TextConditioner(vocab, dim=denoiser_config.context_dim)
        self.unet = ConditionalUNet(denoiser_config)
        self.schedule = schedule or make_schedule()

    @property
    def resolution_divisor(self) -> int:
        return self.codec.config.downsample_factor * self.unet.config.spatial_divisor

    def check_resolution(self, height: int, width: int) -> None:
        div = self.resolution_divisor
        if height % div or width % div:
            raise ValueError(f"image size {height}x{width} is incompatible with the model; "
                             f"both sides must be divisible by {div}")

    def denoise_eps(self, z_noisy: Tensor, z_cond: Tensor, t: Tensor | int,
                    ids: Tensor) -> Tensor:
        """Noise prediction for token-id conditioning ``ids`` of shape (B, L)."""
        context, mask = self.text.embed_ids(ids)
        return self.unet(z_noisy, z_cond, torch.as_tensor(t), context.to(z_noisy.dtype), mask)

    def batch_ids(self, instructions: Sequence[str], drop=None) -> Tensor:
        return self.text.batch_ids(instructions, drop)
