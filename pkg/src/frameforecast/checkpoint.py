"""Single-file, versioned checkpoint archive.

Layout: 8-byte magic, uint32 format version, uint64 payload length, 32-byte SHA-256 of the
payload, then the payload (a ``torch.save`` of a plain dict).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .codec import CodecConfig, LatentCodec
from .diffusion.losses import PatchDiscriminator
from .diffusion.model import FuturePredictor
from .diffusion.schedule import make_schedule
from .diffusion.unet import DenoiserConfig
from .errors import CheckpointError
from .text import Vocabulary

MAGIC = b"FFCKPT\x00\x01"
FORMAT_VERSION = 2
_HEADER = struct.Struct("<8sIQ32s")


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference."""

    model_state: dict
    disc_state: dict
    vocab: dict
    config: dict  # ExperimentConfig.to_dict()
    resolution: int
    step: int = 0
    epoch: int = 0
    optimizer_state: dict | None = None
    disc_optimizer_state: dict | None = None
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def build_model(self) -> FuturePredictor:
        cfg = self.config
        sched = cfg["schedule"]
        model = FuturePredictor(
            Vocabulary(self.vocab),
            codec_config=CodecConfig(**cfg["codec"]),
            denoiser_config=DenoiserConfig(**cfg["denoiser"]),
            schedule=make_schedule(sched["num_timesteps"], sched["beta_start"], sched["beta_end"]),
        )
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def build_discriminator(self) -> PatchDiscriminator:
        disc = PatchDiscriminator()
        disc.load_state_dict(self.disc_state)
        return disc


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    buf = io.BytesIO()
    torch.save({
        "model_state": ckpt.model_state,
        "disc_state": ckpt.disc_state,
        "vocab": ckpt.vocab,
        "config": ckpt.config,
        "resolution": ckpt.resolution,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "optimizer_state": ckpt.optimizer_state,
        "disc_optimizer_state": ckpt.disc_optimizer_state,
        "rng_state": ckpt.rng_state,
    }, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, ckpt.version, len(payload), hashlib.sha256(payload).digest()))
        f.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path} is truncated ({len(data)} bytes, header needs {_HEADER.size})")
    magic, version, length, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has checkpoint format version {version}; this code "
                              f"reads version {FORMAT_VERSION}")
    payload = data[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f"{path} is truncated or corrupt: payload is {len(payload)} bytes, "
                              f"header says {length}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path} is corrupt: payload checksum mismatch")
    try:
        d = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - any unpickling failure means a corrupt file
        raise CheckpointError(f"{path} payload could not be decoded: {exc}") from exc
    return Checkpoint(version=version, **d)


def checkpoint_id(path: Path) -> str:
    """Short content hash identifying a checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
