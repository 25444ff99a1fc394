"""Experiment configuration: a JSON document with one section per component.

Keys (all optional; defaults shown by ``ExperimentConfig().to_dict()``)::

    train:       learning_rate, weight_decay, batch_size, stage_resolutions, stage_epochs,
                 warmup_steps, cond_dropout, seed, mode ("scratch" | "finetune"),
                 init_checkpoint, codec_steps, codec_lr, codec_batch_size,
                 adv_start_fraction, disc_lr, precision ("fp32" | "fp16"), max_steps,
                 val_seed, threads, keep_checkpoints (newest per-epoch files kept; null = all)
    codec:       latent_channels, downsample_factor, hidden, variational, kl_weight
    denoiser:    latent_channels, base_channels, channel_mult, num_res_blocks,
                 attention_resolutions, num_heads, transformer_depth, context_dim, norm_groups
    schedule:    num_timesteps, beta_start, beta_end
    loss_weights: diff, perc, adv
    peft:        train_cross_attention, train_self_attention_out_proj, train_codec_last_k_layers
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .codec import CodecConfig
from .diffusion.losses import LossWeights
from .diffusion.peft import PeftPolicy
from .diffusion.unet import DenoiserConfig


@dataclass
class ScheduleConfig:
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    stage_resolutions: Sequence[int] = (64, 128)
    stage_epochs: Sequence[int] = (1, 1)
    warmup_steps: int = 200
    cond_dropout: float = 0.1
    seed: int = 0
    mode: str = "scratch"
    init_checkpoint: str | None = None
    codec_steps: int = 2000
    codec_lr: float = 1e-3
    codec_batch_size: int = 16
    adv_start_fraction: float = 0.1
    disc_lr: float = 1e-4
    precision: str = "fp32"
    max_steps: int | None = None
    val_seed: int = 12345
    threads: int = 1
    keep_checkpoints: int | None = None

    def __post_init__(self):
        self.stage_resolutions = tuple(self.stage_resolutions)
        self.stage_epochs = tuple(self.stage_epochs)
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if len(self.stage_resolutions) != len(self.stage_epochs) or not self.stage_resolutions:
            raise ValueError("stage_resolutions and stage_epochs must be non-empty and "
                             "of equal length")
        if any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage_epochs must be >= 0")
        if self.mode not in ("scratch", "finetune"):
            raise ValueError(f"mode must be 'scratch' or 'finetune', got {self.mode!r}")
        if self.precision not in ("fp32", "fp16"):
            raise ValueError(f"precision must be 'fp32' or 'fp16', got {self.precision!r}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must be in [0, 1]")
        if self.keep_checkpoints is not None and self.keep_checkpoints < 1:
            raise ValueError("keep_checkpoints must be >= 1 or null")


_SECTIONS = {
    "train": TrainConfig,
    "codec": CodecConfig,
    "denoiser": DenoiserConfig,
    "schedule": ScheduleConfig,
    "loss_weights": LossWeights,
    "peft": PeftPolicy,
}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    peft: PeftPolicy = field(default_factory=PeftPolicy)

    def __post_init__(self):
        f = self.codec.downsample_factor * self.denoiser.spatial_divisor
        for r in self.train.stage_resolutions:
            if r % f:
                raise ValueError(f"stage resolution {r} must be divisible by {f} "
                                 f"(codec factor x U-Net downsampling)")
        if self.codec.latent_channels != self.denoiser.latent_channels:
            raise ValueError("codec.latent_channels and denoiser.latent_channels must match")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = data.get(name, {}) or {}
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**section)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def merged(self, overrides: dict) -> "ExperimentConfig":
        """Copy with ``{section: {key: value}}`` overrides applied (None values ignored)."""
        d = self.to_dict()
        for section, vals in overrides.items():
            for k, v in vals.items():
                if v is not None:
                    d[section][k] = v
        return ExperimentConfig.from_dict(d)


def desk_config(**train_overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    return cfg.merged({"train": train_overrides}) if train_overrides else cfg
