"""Episode sweeps, identity baseline, multi-frame rollouts and aggregated SSIM/PSNR reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetManifest, apply_prompt_template, load_sample
from .diffusion.model import FuturePredictor
from .episodes import Episode
from .metrics import PSNR_CAP_DB, capped_psnr, psnr, ssim
from .sampler import SamplerConfig, predict_batch
from .trainer import resize_for_stage

logger = logging.getLogger(__name__)


@dataclass
class MetricResult:
    sample_id: str
    task: str
    ssim: float
    psnr: float
    input_frame: int | None = None
    target_frame: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def score(sample_id: str, task: str, prediction: np.ndarray, truth: np.ndarray,
          input_frame: int | None = None, target_frame: int | None = None) -> MetricResult:
    return MetricResult(sample_id, task, ssim(prediction, truth), psnr(prediction, truth),
                        input_frame, target_frame)


def sweep_starts(num_frames: int, delta_t: int, stride: int = 1) -> list[int]:
    return list(range(0, num_frames - delta_t, max(stride, 1)))


def _at(image: np.ndarray, resolution: int | None) -> np.ndarray:
    return image if resolution is None else resize_for_stage(image, resolution)


def _predict_chunks(model, inputs, instructions, keys, config, batch_size):
    preds = []
    for i in range(0, len(inputs), batch_size):
        preds += predict_batch(model, inputs[i:i + batch_size], instructions[i:i + batch_size],
                               config, keys[i:i + batch_size])
    return preds


def evaluate_episode_sweep(episode: Episode, model: FuturePredictor, config: SamplerConfig,
                           delta_t: int = 100, frame_stride: int = 1,
                           resolution: int | None = None,
                           batch_size: int = 32) -> list[MetricResult]:
    """Predict frame ``i + delta_t`` from frame ``i`` for every selected ``i`` and score it.

    When a batch fails its frames are retried one at a time; a frame that still fails is
    recorded with ``error`` set and the sweep continues. Frames are area-resized to
    ``resolution`` when given.
    """
    if episode.num_frames <= delta_t:
        raise ValueError(f"episode {episode.episode_id} has {episode.num_frames} frames; "
                         f"needs more than delta_t={delta_t}")
    starts = sweep_starts(episode.num_frames, delta_t, frame_stride)
    results: list[MetricResult] = []
    for c in range(0, len(starts), batch_size):
        chunk = starts[c:c + batch_size]
        try:
            results += _sweep_chunk(episode, model, config, chunk, delta_t, resolution)
        except Exception as exc:  # noqa: BLE001 - isolate the failing frames
            logger.warning("sweep batch at frame %d failed (%s); retrying per frame", chunk[0], exc)
            for i in chunk:
                try:
                    results += _sweep_chunk(episode, model, config, [i], delta_t, resolution)
                except Exception as exc_i:  # noqa: BLE001 - mark and continue the sweep
                    results.append(MetricResult(f"{episode.episode_id}:{i}", episode.task,
                                                math.nan, math.nan, i, i + delta_t,
                                                error=str(exc_i)))
    return results


def _sweep_chunk(episode, model, config, chunk, delta_t, resolution) -> list[MetricResult]:
    keys = [f"{episode.episode_id}:{i}" for i in chunk]
    inputs = [_at(episode.frame(i), resolution) for i in chunk]
    preds = predict_batch(model, inputs, [_prompt(episode)] * len(chunk), config, keys)
    return [score(k, episode.task, p, _at(episode.frame(i + delta_t), resolution), i, i + delta_t)
            for k, i, p in zip(keys, chunk, preds)]


def _prompt(episode: Episode) -> str:
    return apply_prompt_template(episode.instruction)


def identity_baseline(episode: Episode, delta_t: int = 100, frame_stride: int = 1,
                      resolution: int | None = None) -> list[MetricResult]:
    """Score the trivial predictor that returns the input frame unchanged."""
    results = []
    for i in sweep_starts(episode.num_frames, delta_t, frame_stride):
        a = _at(episode.frame(i), resolution)
        b = _at(episode.frame(i + delta_t), resolution)
        results.append(score(f"{episode.episode_id}:{i}", episode.task, a, b, i, i + delta_t))
    return results


@dataclass
class RolloutItem:
    input_frame: int
    prediction: np.ndarray
    truth: np.ndarray
    metrics: MetricResult
    input_image: np.ndarray


def rollout_eval(episode: Episode, model: FuturePredictor, start_frame: int, count: int,
                 config: SamplerConfig, delta_t: int = 100,
                 resolution: int | None = None) -> list[RolloutItem]:
    """Sliding-input multi-frame prediction: frame ``start + k`` -> ``start + k + delta_t``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    last = start_frame + count - 1 + delta_t
    if start_frame < 0 or last >= episode.num_frames:
        raise ValueError(f"rollout needs frames {start_frame}..{last} but episode "
                         f"{episode.episode_id} has {episode.num_frames}")
    idx = list(range(start_frame, start_frame + count))
    inputs = [_at(episode.frame(i), resolution) for i in idx]
    keys = [f"{episode.episode_id}:{i}" for i in idx]
    preds = predict_batch(model, inputs, [_prompt(episode)] * count, config, keys)
    items = []
    for i, k, inp, p in zip(idx, keys, inputs, preds):
        gt = _at(episode.frame(i + delta_t), resolution)
        items.append(RolloutItem(i, p, gt, score(k, episode.task, p, gt, i, i + delta_t), inp))
    return items


# --------------------------------------------------------------------------- dataset evaluation

def evaluate_dataset(root: Path, manifest: DatasetManifest, model: FuturePredictor,
                     config: SamplerConfig, split: str = "test", resolution: int | None = None,
                     batch_size: int = 32, limit: int | None = None
                     ) -> tuple[list[MetricResult], list[MetricResult], dict]:
    """Score the model and the identity baseline on the written pairs of ``split``.

    Returns ``(model_results, baseline_results, examples)`` where ``examples`` holds a few
    (input, truth, prediction) image triples for figures.
    """
    samples = manifest.by_id()
    ids = manifest.ids(split)[:limit]
    if not ids:
        raise ValueError(f"split {split!r} has no samples")
    ins, gts, texts = [], [], []
    for sid in ids:
        a, b, text = load_sample(root, samples[sid], manifest.ext)
        ins.append(_at(a, resolution))
        gts.append(_at(b, resolution))
        texts.append(text)
    preds = _predict_chunks(model, ins, texts, ids, config, batch_size)
    res, base = [], []
    for sid, a, b, p in zip(ids, ins, gts, preds):
        s = samples[sid]
        res.append(score(sid, s.task, p, b, s.input_frame, s.target_frame))
        base.append(score(sid, s.task, a, b, s.input_frame, s.target_frame))
    examples = {"ids": ids[:4], "inputs": ins[:4], "truths": gts[:4], "predictions": preds[:4]}
    return res, base, examples


# --------------------------------------------------------------------------- reports

def _stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "min": float(arr.min()),
            "max": float(arr.max()), "count": int(arr.size)}


def aggregate(results: Sequence[MetricResult]) -> dict:
    """Overall and per-task SSIM/PSNR statistics over successful results.

    Infinite PSNR values (identical images) are replaced by ``PSNR_CAP_DB`` and counted
    under ``psnr_capped``.
    """
    ok = [r for r in results if r.ok]
    if not ok:
        raise ValueError("cannot aggregate an empty result list")

    def block(rs):
        return {"ssim": _stats([r.ssim for r in rs]),
                "psnr": _stats([capped_psnr(r.psnr) for r in rs]),
                "psnr_capped": sum(math.isinf(r.psnr) for r in rs)}

    out = {"overall": block(ok), "per_task": {},
           "failures": len(results) - len(ok), "psnr_cap_db": PSNR_CAP_DB}
    for task in sorted({r.task for r in ok}):
        out["per_task"][task] = block([r for r in ok if r.task == task])
    return out


@dataclass
class EvalReport:
    per_sample: list[MetricResult]
    aggregates: dict
    baseline: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def row(r: MetricResult) -> dict:
            d = asdict(r)
            d["psnr"] = "inf" if math.isinf(r.psnr) else r.psnr
            return d
        return {"per_sample": [row(r) for r in self.per_sample], "aggregates": self.aggregates,
                "baseline": self.baseline, "config": self.config}

    def save(self, out_dir: Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / f"{stem}.json"
        jpath.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        cpath = out_dir / f"{stem}.csv"
        with open(cpath, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "task", "input_frame", "target_frame", "ssim", "psnr", "error"])
            for r in self.per_sample:
                w.writerow([r.sample_id, r.task, r.input_frame, r.target_frame, repr(r.ssim),
                            "inf" if math.isinf(r.psnr) else repr(r.psnr), r.error or ""])
        return jpath, cpath


def aggregate_report(results: Sequence[MetricResult],
                     baseline: Sequence[MetricResult] | None = None,
                     config: dict | None = None) -> EvalReport:
    """Aggregate model results, and optionally baseline results plus mean deltas."""
    if not results:
        raise ValueError("cannot build a report from zero results")
    aggs = aggregate(results)
    base = {}
    if baseline:
        base = aggregate(baseline)
        base["delta_vs_model"] = {
            "ssim_mean": aggs["overall"]["ssim"]["mean"] - base["overall"]["ssim"]["mean"],
            "psnr_mean": aggs["overall"]["psnr"]["mean"] - base["overall"]["psnr"]["mean"],
        }
    return EvalReport(list(results), aggs, base, dict(config or {}))


# --------------------------------------------------------------------------- epoch ablation

def run_epoch_ablation(root: Path, manifest: DatasetManifest, config, epochs: Sequence[int],
                       sampler: SamplerConfig, out_dir: Path, split: str = "test",
                       batch_size: int = 32) -> list[dict]:
    """Train one model per epoch budget on the same data and score each on ``split``.

    Every run uses ``config`` with its final-stage epoch count replaced. Writes
    ``ablation.csv``, ``ablation.json`` and ``ablation.png`` under ``out_dir``.
    """
    from .plotting import plot_epoch_ablation
    from .trainer import train

    out_dir = Path(out_dir)
    rows = []
    for n in epochs:
        stage_epochs = list(config.train.stage_epochs)
        stage_epochs[-1] = n
        cfg = config.merged({"train": {"stage_epochs": stage_epochs}})
        ckpt, log = train(root, manifest, cfg, out_dir / f"epochs_{n:03d}")
        res, base, _ = evaluate_dataset(root, manifest, ckpt.build_model(), sampler, split,
                                        ckpt.resolution, batch_size)
        agg, bagg = aggregate(res)["overall"], aggregate(base)["overall"]
        rows.append({"epochs": n, "steps": ckpt.step,
                     "ssim_mean": agg["ssim"]["mean"], "psnr_mean": agg["psnr"]["mean"],
                     "baseline_ssim_mean": bagg["ssim"]["mean"],
                     "baseline_psnr_mean": bagg["psnr"]["mean"],
                     "final_val_loss": log.val[-1]["loss_total"] if log.val else math.nan})
        logger.info("ablation: %d epochs -> SSIM %.4f", n, agg["ssim"]["mean"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    (out_dir / "ablation.json").write_text(json.dumps(
        {"rows": rows, "split": split, "sampler": sampler.to_dict()}, indent=2) + "\n")
    plot_epoch_ablation(rows, out_dir / "ablation.png")
    return rows
