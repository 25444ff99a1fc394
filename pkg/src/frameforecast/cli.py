"""Command-line entry point: ``frameforecast <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

logger = logging.getLogger("frameforecast")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _splits(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid split fractions {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return parts


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every stochastic step")
    common.add_argument("--config", type=Path, default=None, help="experiment config (JSON)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="frameforecast",
                description="Instruction-conditioned future-frame prediction with latent diffusion.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-episodes", parents=[common], help="render synthetic episodes")
    g.add_argument("--task", required=True,
                   help="hammer_beat, handover, stack, or 'all' (comma lists accepted)")
    g.add_argument("--episodes", type=int, required=True, help="episodes per task")
    g.add_argument("--frames", type=int, default=400)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--ext", choices=("png", "jpg"), default="png")
    g.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("build-dataset", parents=[common], help="pair frames into samples")
    b.add_argument("--episodes-dir", type=Path, required=True)
    b.add_argument("--dt", type=int, default=100)
    b.add_argument("--stride", type=int, default=10, help="0 = single pair from frame 0")
    b.add_argument("--splits", type=_splits, default=(0.8, 0.1, 0.1))
    b.add_argument("--ext", choices=("png", "jpg"), default="png")
    b.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a built dataset")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--epochs", type=_int_list, default=None, help="epochs per stage, e.g. 2,10")
    t.add_argument("--resolutions", type=_int_list, default=None, help="stage sizes, e.g. 64,128")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--codec-steps", type=int, default=None)
    t.add_argument("--mode", choices=("scratch", "finetune"), default=None)
    t.add_argument("--init-checkpoint", default=None)
    t.add_argument("--precision", choices=("fp32", "fp16"), default=None)

    pr = sub.add_parser("predict", parents=[common], help="predict the future frame of one image")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--image", type=Path, required=True)
    pr.add_argument("--instruction", required=True)
    pr.add_argument("--steps", type=int, default=100)
    pr.add_argument("--guidance", type=float, default=1.5)
    pr.add_argument("--eta", type=float, default=0.0)
    pr.add_argument("--post-process", action="store_true")
    pr.add_argument("--raw-instruction", action="store_true",
                    help="use the text as-is instead of applying the prompt template")
    pr.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--guidance", type=float, default=1.5)
    e.add_argument("--eta", type=float, default=0.0)
    e.add_argument("--post-process", action="store_true")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--report", type=Path, required=True)

    r = sub.add_parser("rollout", parents=[common], help="multi-frame sliding rollout on an episode")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--episode", type=Path, required=True)
    r.add_argument("--start", type=int, default=47)
    r.add_argument("--count", type=int, default=3)
    r.add_argument("--dt", type=int, default=100)
    r.add_argument("--steps", type=int, default=100)
    r.add_argument("--guidance", type=float, default=1.5)
    r.add_argument("--out", type=Path, required=True)
    return p


# --------------------------------------------------------------------------- commands

def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def cmd_gen_episodes(args) -> int:
    from .episodes import TASKS, SyntheticSceneSpec, render_synthetic_episode, write_robotwin_episode

    tasks = list(TASKS) if args.task == "all" else args.task.split(",")
    for task in tasks:
        if task not in TASKS:
            raise UsageError(f"unknown task {task!r}; expected one of {TASKS} or 'all'")
    if args.episodes < 1 or args.frames < 2:
        raise UsageError("--episodes must be >= 1 and --frames >= 2")
    seed = _seed(args)
    specs = [SyntheticSceneSpec(task, seed + i, args.frames, args.resolution)
             for task in tasks for i in range(args.episodes)]
    for spec in specs:
        write_robotwin_episode(render_synthetic_episode(spec), args.out, args.ext)
        logger.info("wrote %s", spec.episode_id)
    print(f"wrote {len(specs)} episodes to {args.out}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    from .dataset import assign_sample_ids, build_pairs, split_dataset, write_instructpix2pix_layout
    from .episodes import discover_episodes, ingest_robotwin_episode

    episodes, pairs = {}, []
    for path in discover_episodes(args.episodes_dir):
        ep = ingest_robotwin_episode(path)
        episodes[ep.episode_id] = ep
        pairs += build_pairs(ep, args.dt, args.stride)
    pairs = assign_sample_ids(pairs)
    prov = {"episodes_dir": str(args.episodes_dir),
            "episodes": {k: v.source for k, v in sorted(episodes.items())}}
    manifest = write_instructpix2pix_layout(pairs, episodes, args.out, args.ext, prov,
                                            args.dt, args.stride)
    manifest = split_dataset(manifest, args.splits, _seed(args))
    manifest.save(args.out)
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.samples)} samples from {len(episodes)} episodes to {args.out} "
          f"(splits {counts})")
    return EXIT_OK


def _experiment_config(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.merged({"train": {
        "seed": args.seed,
        "threads": args.threads,
        "stage_epochs": args.epochs,
        "stage_resolutions": args.resolutions,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "max_steps": args.max_steps,
        "codec_steps": args.codec_steps,
        "mode": args.mode,
        "init_checkpoint": args.init_checkpoint,
        "precision": args.precision,
    }})


def cmd_train(args) -> int:
    from .trainer import run_training

    if not (Path(args.dataset) / "manifest.json").exists():
        raise FileNotFoundError(f"dataset path not found or has no manifest: {args.dataset}")
    try:
        cfg = _experiment_config(args)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if cfg.train.stage_epochs and args.resolutions and not args.epochs \
            and len(cfg.train.stage_epochs) != len(args.resolutions):
        raise UsageError("--resolutions needs a matching --epochs list")
    ckpt, log = run_training(args.dataset, cfg, args.out)
    print(f"trained {ckpt.step} steps over {ckpt.epoch} epochs; checkpoint at "
          f"{Path(args.out) / 'last.ckpt'}")
    return EXIT_OK


def _load_model(path: Path):
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model()


def _fit_image(image, resolution: int):
    from .trainer import resize_for_stage

    h, w = image.shape[:2]
    if (h, w) == (resolution, resolution):
        return image
    if h != w or h < resolution:
        raise ValueError(f"input image is {w}x{h}; the checkpoint expects square images of at "
                         f"least {resolution}x{resolution}")
    return resize_for_stage(image, resolution)


def cmd_predict(args) -> int:
    from .dataset import apply_prompt_template
    from .episodes import load_image, save_image
    from .sampler import SamplerConfig, predict_future_frame

    ckpt, model = _load_model(args.checkpoint)
    image = _fit_image(load_image(args.image), ckpt.resolution)
    text = args.instruction if args.raw_instruction else apply_prompt_template(args.instruction)
    cfg = SamplerConfig(args.steps, args.guidance, args.eta, _seed(args), args.post_process)
    pred = predict_future_frame(model, image, text, cfg, key=args.image.name)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_image(pred, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import checkpoint_id
    from .dataset import DatasetManifest
    from .evaluation import aggregate_report, evaluate_dataset
    from .plotting import plot_examples, plot_metric_distributions
    from .sampler import SamplerConfig

    manifest = DatasetManifest.load(args.dataset)
    ckpt, model = _load_model(args.checkpoint)
    cfg = SamplerConfig(args.steps, args.guidance, args.eta, _seed(args), args.post_process)
    res, base, examples = evaluate_dataset(args.dataset, manifest, model, cfg, args.split,
                                           ckpt.resolution, args.batch_size, args.limit)
    report = aggregate_report(res, base, {
        "checkpoint": str(args.checkpoint), "checkpoint_id": checkpoint_id(args.checkpoint),
        "dataset": str(args.dataset), "split": args.split, "resolution": ckpt.resolution,
        "delta_t": manifest.delta_t, "baseline": "identity", **cfg.to_dict()})
    report.save(args.report)
    plot_metric_distributions(res, base, args.report / "metrics.png")
    plot_examples(examples, args.report / "examples.png")
    o, b = report.aggregates["overall"], report.baseline["overall"]
    print(f"SSIM {o['ssim']['mean']:.4f} (baseline {b['ssim']['mean']:.4f})  "
          f"PSNR {o['psnr']['mean']:.2f} dB (baseline {b['psnr']['mean']:.2f} dB)  "
          f"n={o['ssim']['count']}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    from .checkpoint import checkpoint_id
    from .episodes import ingest_robotwin_episode
    from .evaluation import aggregate_report, rollout_eval
    from .plotting import plot_rollout_grid
    from .sampler import SamplerConfig

    ckpt, model = _load_model(args.checkpoint)
    episode = ingest_robotwin_episode(args.episode)
    cfg = SamplerConfig(args.steps, args.guidance, 0.0, _seed(args))
    items = rollout_eval(episode, model, args.start, args.count, cfg, args.dt, ckpt.resolution)
    report = aggregate_report([it.metrics for it in items], config={
        "checkpoint_id": checkpoint_id(args.checkpoint), "episode": str(args.episode),
        "start": args.start, "count": args.count, "delta_t": args.dt, **cfg.to_dict()})
    report.save(args.out, stem="rollout")
    plot_rollout_grid(items, args.out / "rollout_grid.png")
    for it in items:
        print(f"frame {it.input_frame} -> {it.metrics.target_frame}: "
              f"SSIM {it.metrics.ssim:.4f} PSNR {it.metrics.psnr:.2f} dB")
    return EXIT_OK


COMMANDS = {
    "gen-episodes": cmd_gen_episodes,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "rollout": cmd_rollout,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(args.threads, 1))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"frameforecast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"frameforecast {args.command}: path not found: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        if args.verbose:
            logger.exception("command failed")
        print(f"frameforecast {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
