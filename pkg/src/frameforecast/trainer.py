"""Progressive-resolution training of the future-frame predictor."""

from __future__ import annotations

import copy
import dataclasses
import csv
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import LatentCodec, image_to_tensor, train_codec
from .config import ExperimentConfig
from .dataset import DatasetManifest, load_sample
from .diffusion.losses import (LossWeights, PatchDiscriminator, PerceptualFeatures,
                               composite_loss, discriminator_step)
from .diffusion.model import FuturePredictor
from .diffusion.peft import apply_mask, peft_mask
from .diffusion.schedule import make_schedule
from .errors import DivergenceError
from .text import Vocabulary

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("loss_total", "loss_diff", "loss_perc", "loss_adv")


# --------------------------------------------------------------------------- resizing

def _area_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) matrix averaging source cells by their exact overlap with each target cell."""
    m = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for i in range(n_dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_src)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / scale


def resize_for_stage(image: np.ndarray, resolution: int, factor: int | None = None) -> np.ndarray:
    """Area-average an H x W x 3 image down to ``resolution`` x ``resolution``."""
    h, w = image.shape[:2]
    if resolution > h or resolution > w:
        raise ValueError(f"cannot upsample a {h}x{w} image to {resolution}x{resolution}")
    if factor and resolution % factor:
        raise ValueError(f"resolution {resolution} is not divisible by codec factor {factor}")
    if h == resolution and w == resolution:
        return np.asarray(image, dtype=np.float32)
    img = np.asarray(image, dtype=np.float64)
    rows, cols = _area_matrix(h, resolution), _area_matrix(w, resolution)
    out = np.einsum("ih,hwc,jw->ijc", rows, img, cols)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- data

@dataclass
class PairTensors:
    ids: list[str]
    inputs: torch.Tensor  # (N, 3, H, W)
    targets: torch.Tensor
    instructions: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def resized(self, resolution: int) -> "PairTensors":
        if self.inputs.shape[-1] == resolution:
            return self
        return PairTensors(self.ids, _resize_batch(self.inputs, resolution),
                           _resize_batch(self.targets, resolution), self.instructions)


def _resize_batch(images: torch.Tensor, resolution: int) -> torch.Tensor:
    return torch.stack([image_to_tensor(resize_for_stage(im.permute(1, 2, 0).numpy(), resolution))
                        for im in images])


def load_split(root: Path, manifest: DatasetManifest, split: str) -> PairTensors:
    samples = manifest.by_id()
    ids = manifest.ids(split)
    ins, tgts, texts = [], [], []
    for sid in ids:
        a, b, text = load_sample(root, samples[sid], manifest.ext)
        ins.append(image_to_tensor(a))
        tgts.append(image_to_tensor(b))
        texts.append(text)
    if not ids:
        return PairTensors([], torch.empty(0, 3, 1, 1), torch.empty(0, 3, 1, 1), [])
    return PairTensors(ids, torch.stack(ins), torch.stack(tgts), texts)


# --------------------------------------------------------------------------- logging

@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)
    codec: list[float] = field(default_factory=list)
    disc: list[float] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("step",) + LOSS_COLUMNS)
            for row in self.steps:
                w.writerow([row["step"]] + [repr(row[c]) for c in LOSS_COLUMNS])
        with open(out_dir / "val.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("epoch", "stage", "resolution", "step") + LOSS_COLUMNS)
            for row in self.val:
                w.writerow([row["epoch"], row["stage"], row["resolution"], row["step"]]
                           + [repr(row[c]) for c in LOSS_COLUMNS])
        with open(out_dir / "timing.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("step", "wall_time_s"))
            for row, ts in zip(self.steps, self.timestamps):
                w.writerow([row["step"], f"{ts:.3f}"])


# --------------------------------------------------------------------------- training

@contextmanager
def deterministic(threads: int = 1):
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to 1 over ``warmup_steps``, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return 1.0
    return step / warmup_steps


def _steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


@torch.no_grad()
def validation_loss(model: FuturePredictor, data: PairTensors, weights: LossWeights,
                    features: PerceptualFeatures, disc: PatchDiscriminator, seed: int,
                    batch_size: int = 16) -> dict[str, float]:
    """Size-weighted mean loss components on ``data`` with a fixed timestep/noise stream."""
    gen = torch.Generator().manual_seed(seed)
    totals = dict.fromkeys(LOSS_COLUMNS, 0.0)
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        out = composite_loss(model, data.inputs[sl], data.targets[sl], data.instructions[sl],
                             weights, features, disc, cond_dropout=0.0, generator=gen)
        n = len(data.ids[sl])
        for k, v in out.components().items():
            totals[k] += v * n
    return {k: v / len(data) for k, v in totals.items()}


def _codec_images(data: PairTensors, resolutions: Sequence[int]) -> list[torch.Tensor]:
    groups = []
    for r in resolutions:
        d = data.resized(r)
        groups.append(torch.cat([d.inputs, d.targets]))
    return groups


def train(root: Path, manifest: DatasetManifest, config: ExperimentConfig,
          out_dir: Path | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train on ``manifest``'s train split, validating on its val split after every epoch.

    Stages run at ``config.train.stage_resolutions`` in order. In ``scratch`` mode the codec
    is fit first and then frozen while the text table and U-Net train; in ``finetune``
    mode the model is loaded from ``init_checkpoint`` and only PEFT-selected parameters
    train. Checkpoints (``epoch_XXX.ckpt`` and ``last.ckpt``) and logs go to ``out_dir``.
    """
    tc = config.train
    root = Path(root)
    with deterministic(tc.threads):
        torch.manual_seed(tc.seed)
        np.random.seed(tc.seed % (2 ** 32))
        train_data = load_split(root, manifest, "train")
        val_data = load_split(root, manifest, "val")
        if not len(train_data):
            raise ValueError("manifest has an empty train split")
        if not len(val_data):
            raise ValueError("manifest has an empty val split")
        log = TrainLog(val_ids=list(val_data.ids))
        t0 = time.perf_counter()

        if tc.mode == "finetune":
            if not tc.init_checkpoint:
                raise ValueError("finetune mode requires train.init_checkpoint")
            model = load_checkpoint(tc.init_checkpoint).build_model()
            mask = peft_mask(model, config.peft)
            trainable = apply_mask(model, mask)
        else:
            gen_seed = tc.seed
            torch.manual_seed(gen_seed)
            codec = LatentCodec(config.codec)
            codec, log.codec = train_codec(
                _codec_images(train_data, tc.stage_resolutions), steps=tc.codec_steps,
                codec=codec, lr=tc.codec_lr, batch_size=tc.codec_batch_size, seed=gen_seed)
            final = train_data.resized(tc.stage_resolutions[-1])
            codec.fit_latent_scale(torch.cat([final.inputs, final.targets]))
            vocab = Vocabulary.from_texts(sorted(set(train_data.instructions)))
            torch.manual_seed(gen_seed + 1)
            sc = config.schedule
            model = FuturePredictor(vocab, denoiser_config=config.denoiser, codec=codec,
                                    schedule=make_schedule(sc.num_timesteps, sc.beta_start,
                                                           sc.beta_end))
            model.codec.requires_grad_(False)
            trainable = [p for p in model.parameters() if p.requires_grad]

        torch.manual_seed(tc.seed + 2)
        disc = PatchDiscriminator()
        features = PerceptualFeatures()
        opt = torch.optim.AdamW(trainable, lr=tc.learning_rate, weight_decay=tc.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: warmup_factor(s, tc.warmup_steps))
        dopt = torch.optim.AdamW(disc.parameters(), lr=tc.disc_lr, weight_decay=tc.weight_decay)
        gen = torch.Generator().manual_seed(tc.seed + 3)

        total_steps = sum(e * _steps_per_epoch(len(train_data), tc.batch_size)
                          for e in tc.stage_epochs)
        if tc.max_steps is not None:
            total_steps = min(total_steps, tc.max_steps)
        adv_start = int(math.ceil(tc.adv_start_fraction * total_steps))
        off = dataclasses.replace(config.loss_weights, adv=0.0)

        step = epoch = 0
        ckpt = None
        amp = tc.precision == "fp16"
        for stage, (res, n_epochs) in enumerate(zip(tc.stage_resolutions, tc.stage_epochs)):
            data = train_data.resized(res)
            vdata = val_data.resized(res)
            for _ in range(n_epochs):
                if step >= total_steps:
                    break
                model.train()
                perm = torch.randperm(len(data), generator=gen)
                for i in range(0, len(data), tc.batch_size):
                    if step >= total_steps:
                        break
                    idx = perm[i:i + tc.batch_size]
                    weights = config.loss_weights if step >= adv_start else off
                    with torch.autocast("cpu", dtype=torch.bfloat16, enabled=amp):
                        out = composite_loss(model, data.inputs[idx], data.targets[idx],
                                             [data.instructions[j] for j in idx.tolist()],
                                             weights, features, disc,
                                             cond_dropout=tc.cond_dropout, generator=gen)
                    opt.zero_grad(set_to_none=True)
                    out.total.backward()
                    opt.step()
                    sched.step()
                    log.disc.append(discriminator_step(disc, dopt, data.targets[idx],
                                                       out.prediction))
                    log.steps.append({"step": step, **out.components()})
                    log.timestamps.append(time.perf_counter() - t0)
                    step += 1
                epoch += 1
                model.eval()
                vals = validation_loss(model, vdata, config.loss_weights, features, disc,
                                       tc.val_seed)
                log.val.append({"epoch": epoch, "stage": stage, "resolution": res,
                                "step": step, **vals})
                logger.info("epoch %d (stage %d, %dpx) step %d train %.4f val %.4f", epoch,
                            stage, res, step, log.steps[-1]["loss_total"], vals["loss_total"])
                ckpt = _snapshot(model, disc, config, res, step, epoch, opt, dopt, gen)
                if out_dir is not None:
                    ckpt_dir = Path(out_dir) / "checkpoints"
                    save_checkpoint(ckpt, ckpt_dir / f"epoch_{epoch:03d}.ckpt")
                    if tc.keep_checkpoints is not None:
                        kept = sorted(ckpt_dir.glob("epoch_*.ckpt"),
                                      key=lambda p: int(p.stem.split("_")[1]))
                        for old in kept[:-tc.keep_checkpoints]:
                            old.unlink()
                    save_checkpoint(ckpt, Path(out_dir) / "last.ckpt")
                    log.write(out_dir)

        if ckpt is None:
            ckpt = _snapshot(model, disc, config, tc.stage_resolutions[-1], step, epoch, opt,
                             dopt, gen)
            if out_dir is not None:
                save_checkpoint(ckpt, Path(out_dir) / "last.ckpt")
        if out_dir is not None:
            log.write(out_dir)
        return ckpt, log


def _snapshot(model, disc, config, res, step, epoch, opt, dopt, gen) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        disc_state={k: v.detach().clone() for k, v in disc.state_dict().items()},
        vocab=model.text.vocab.to_dict(),
        config=config.to_dict(),
        resolution=res,
        step=step,
        epoch=epoch,
        optimizer_state=copy.deepcopy(opt.state_dict()),
        disc_optimizer_state=copy.deepcopy(dopt.state_dict()),
        rng_state={"train_generator": gen.get_state()},
    )


def run_training(root: Path, config: ExperimentConfig, out_dir: Path) -> tuple[Checkpoint, TrainLog]:
    """Load the manifest under ``root``, train, and write logs plus a loss-curve figure."""
    from .plotting import plot_loss_curves

    manifest = DatasetManifest.load(root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")
    try:
        ckpt, log = train(root, manifest, config, out_dir)
    except DivergenceError:
        logger.error("training diverged; last good checkpoint kept at %s", out_dir / "last.ckpt")
        raise
    plot_loss_curves(log, out_dir / "loss_curves.png")
    return ckpt, log
