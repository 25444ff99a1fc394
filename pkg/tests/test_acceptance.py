"""Acceptance criteria, one test each.

Every test prints a ``criterion N: PASS|FAIL ...`` line before asserting; the lines are
collected into a summary section at the end of the pytest run.
"""

import filecmp
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from frameforecast.cli import run
from frameforecast.codec import CodecConfig
from frameforecast.config import ExperimentConfig
from frameforecast.dataset import (build_pairs, split_dataset,
                                   write_instructpix2pix_layout)
from frameforecast.diffusion import (FuturePredictor, LossWeights, PatchDiscriminator, PeftPolicy,
                                     PerceptualFeatures, apply_mask, composite_loss,
                                     forward_noise, make_schedule, peft_mask, trainable_fraction)
from frameforecast.diffusion.unet import DenoiserConfig
from frameforecast.episodes import (TASKS, SyntheticSceneSpec, load_image,
                                    render_synthetic_episode)
from frameforecast.evaluation import aggregate, evaluate_dataset, run_epoch_ablation
from frameforecast.metrics import psnr, ssim
from frameforecast.sampler import SamplerConfig, ddim_sample, guided_eps
from frameforecast.text import Vocabulary
from frameforecast.trainer import train
from conftest import PROMPTS, TINY_CONFIG, make_toy_dataset
from oracles import enumerate_pairs, psnr_direct, ssim_direct


def check(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# --------------------------------------------------------------------------- 1-3 metrics

def test_c01_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        worst = max(worst, abs(ssim(a, b) - ssim_direct(a, b)), abs(psnr(a, b) - psnr_direct(a, b)))
    elapsed = time.perf_counter() - t0
    check(1, worst < 1e-6 and elapsed < 10, f"max |diff|={worst:.2e}, {elapsed:.2f}s")


def test_c02_identity_metrics():
    x = np.random.default_rng(2).random((32, 32, 3))
    s, p = ssim(x, x), psnr(x, x)
    check(2, s == 1.0 and p == math.inf, f"SSIM(x,x)={s!r}, PSNR(x,x)={p!r}")


def test_c03_analytic_psnr():
    x = np.random.default_rng(3).integers(0, 255, (32, 32, 3)) / 255.0
    p = psnr(x, x + 1 / 255)
    check(3, abs(p - 48.13) <= 0.01, f"PSNR={p:.4f} dB")


# --------------------------------------------------------------------------- 4-6 diffusion algebra

def test_c04_guidance_algebra():
    g = torch.Generator().manual_seed(4)
    ec = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    eu = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    exact = torch.equal(guided_eps(ec, eu, 1.0), ec) and torch.equal(guided_eps(ec, eu, 0.0), eu)
    d = (ec - eu).flatten()
    resid = 0.0
    for w in (0.0, 0.5, 1.0):
        v = (guided_eps(ec, eu, w) - eu).flatten()
        lam = float(v @ d / (d @ d))
        resid = max(resid, float((v - lam * d).abs().max()), abs(lam - w))
    check(4, exact and resid < 1e-6, f"bit-exact endpoints={exact}, max residual={resid:.2e}")


def test_c05_ddim_oracle_inversion():
    sched = make_schedule()
    g = torch.Generator().manual_seed(5)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10):
        z0 = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
        z_T = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
        z_T = forward_noise(sched, z0, 1000, z_T)

        def oracle(z, t, z0=z0):
            ab = sched.alpha_bars[t]
            return (z - ab.sqrt() * z0) / (1 - ab).sqrt()

        out = ddim_sample(sched, oracle, z_T, 100, eta=0.0)
        worst = max(worst, float((out - z0).abs().max()))
    elapsed = time.perf_counter() - t0
    check(5, worst < 1e-4 and elapsed < 30, f"max abs error={worst:.2e}, {elapsed:.2f}s")


def test_c06_forward_process_statistics():
    sched = make_schedule()
    n = 10_000
    g = torch.Generator().manual_seed(6)
    z0 = torch.tensor([1.5, -0.7, 0.0, 2.0], dtype=torch.float64)
    worst = 0.0
    for t in (1, 500, 1000):
        eps = torch.randn(n, 4, generator=g, dtype=torch.float64)
        zt = forward_noise(sched, z0.expand(n, 4), torch.full((n,), t), eps)
        ab = float(sched.alpha_bars[t])
        var = 1 - ab
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2 / (n - 1))
        mean_dev = ((zt.mean(0) - math.sqrt(ab) * z0).abs() / se_mean).max()
        var_dev = ((zt.var(0) - var).abs() / se_var).max()
        worst = max(worst, float(mean_dev), float(var_dev))
    check(6, worst < 3, f"max deviation={worst:.2f} standard errors")


# --------------------------------------------------------------------------- 7-8 training mechanics

MICRO = DenoiserConfig(base_channels=4, channel_mult=(1,), attention_resolutions=(1,), num_heads=1,
                       context_dim=4, norm_groups=2)


def test_c07_gradient_check():
    torch.manual_seed(7)
    model = FuturePredictor(Vocabulary.from_texts(PROMPTS), CodecConfig(hidden=(4, 4)), MICRO,
                            make_schedule()).double()
    model.codec.requires_grad_(False)
    feats, disc = PerceptualFeatures().double(), PatchDiscriminator(4).double()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    n_params = sum(p.numel() for _, p in params)
    g = torch.Generator().manual_seed(7)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    y = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    kw = dict(t=torch.tensor([40, 600]), drop=[False, True],
              noise=torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64))

    def loss():
        return composite_loss(model, x, y, PROMPTS[:2], LossWeights(), feats, disc, **kw).total

    model.zero_grad()
    loss().backward()
    pick = np.random.default_rng(7)
    flat = [(p, i) for _, p in params for i in range(p.numel())]
    chosen = [flat[k] for k in pick.choice(len(flat), 60, replace=False)]
    h, worst = 1e-6, 0.0
    with torch.no_grad():
        for p, i in chosen:
            v = p.view(-1)
            orig = v[i].item()
            v[i] = orig + h
            up = loss().item()
            v[i] = orig - h
            down = loss().item()
            v[i] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[i].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    check(7, n_params < 5000 and worst < 1e-3,
          f"{n_params} trainable params, {len(chosen)} sampled, max relative error={worst:.2e}")


def test_c08_peft_freezing():
    torch.manual_seed(8)
    model = FuturePredictor(Vocabulary.from_texts(PROMPTS))
    mask = peft_mask(model, PeftPolicy())
    trainable = apply_mask(model, mask)
    frac = trainable_fraction(model, mask)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not mask[n]}
    before = {n: p.detach().clone() for n, p in model.named_parameters() if mask[n]}
    opt = torch.optim.AdamW(trainable, lr=1e-3)
    feats, disc = PerceptualFeatures(), PatchDiscriminator()
    g = torch.Generator().manual_seed(8)
    for _ in range(10):
        x, y = torch.rand(2, 3, 32, 32, generator=g), torch.rand(2, 3, 32, 32, generator=g)
        out = composite_loss(model, x, y, PROMPTS[:2], LossWeights(), feats, disc, generator=g)
        opt.zero_grad()
        out.total.backward()
        opt.step()
    params = dict(model.named_parameters())
    identical = all(torch.equal(params[n], v) for n, v in frozen.items())
    moved = any(not torch.equal(params[n], v) for n, v in before.items())
    check(8, identical and moved and frac < 0.35,
          f"trainable fraction={frac:.3f}, frozen bit-identical={identical}, trainable moved={moved}")


# --------------------------------------------------------------------------- 9 dataset pairing

def test_c09_dataset_pairing(tmp_path):
    ep = render_synthetic_episode(SyntheticSceneSpec("stack", 9, 400, 128))
    pairs = build_pairs(ep, 100, 10)
    got = [(p.input_frame, p.target_frame) for p in pairs]
    matches = got == enumerate_pairs(400, 100, 10)
    manifest = write_instructpix2pix_layout(pairs, {ep.episode_id: ep}, tmp_path)
    layout_ok = sorted(p.name for p in (tmp_path / "samples").iterdir()) == \
        [f"{i:06d}" for i in range(len(pairs))]
    for s in manifest.samples:
        d = tmp_path / "samples" / s.sample_id
        names = sorted(p.name for p in d.iterdir())
        layout_ok &= names == sorted([f"{s.sample_id}_0.png", f"{s.sample_id}_1.png",
                                      "prompt.json"])
        layout_ok &= (d / f"{s.sample_id}_0.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        prompt = json.loads((d / "prompt.json").read_text())
        layout_ok &= prompt == {"instruction": s.instruction, "task": "stack",
                                "input_frame": s.input_frame, "target_frame": s.target_frame}
        layout_ok &= np.array_equal(load_image(d / f"{s.sample_id}_1.png"),
                                    ep.frame(s.target_frame))
    check(9, len(pairs) == 30 and matches and bool(layout_ok),
          f"{len(pairs)} pairs, brute-force match={matches}, layout ok={bool(layout_ok)}")


# --------------------------------------------------------------------------- 10 learning signal

E2E_EPISODE_SEEDS = range(9)
E2E_FRAMES = 200
E2E_TRAIN = {"stage_resolutions": [32], "learning_rate": 5e-4, "batch_size": 16,
             "codec_steps": 1500, "max_steps": 3000, "keep_checkpoints": 1}
E2E_GUIDANCE = 1.0


def learning_signal_run(workdir: Path, train_overrides: dict, guidance: float) -> dict:
    """Render episodes, train the desk model from scratch and score the held-out split."""
    t0 = time.perf_counter()
    episodes, pairs = {}, []
    for task in TASKS:
        for seed in E2E_EPISODE_SEEDS:
            ep = render_synthetic_episode(SyntheticSceneSpec(task, seed, E2E_FRAMES, 128))
            episodes[ep.episode_id] = ep
            pairs += build_pairs(ep, 100, 10)
    root = workdir / "data"
    manifest = split_dataset(write_instructpix2pix_layout(pairs, episodes, root), (0.8, 0.1, 0.1))
    manifest.save(root)
    n_train = len(manifest.ids("train"))
    per_epoch = -(-n_train // train_overrides["batch_size"])
    epochs = -(-train_overrides["max_steps"] // per_epoch)
    cfg = ExperimentConfig.from_dict({"train": {**train_overrides, "stage_epochs": [epochs]}})
    ckpt, log = train(root, manifest, cfg, workdir / "run")
    window = 50
    res, base, _ = evaluate_dataset(root, manifest, ckpt.build_model(),
                                    SamplerConfig(num_steps=100, guidance=guidance), "test", 32)
    return {
        "n_train": n_train, "steps": ckpt.step, "base_channels": cfg.denoiser.base_channels,
        "loss_first": float(np.mean([r["loss_diff"] for r in log.steps[:window]])),
        "loss_last": float(np.mean([r["loss_diff"] for r in log.steps[-window:]])),
        "model_ssim": aggregate(res)["overall"]["ssim"]["mean"],
        "base_ssim": aggregate(base)["overall"]["ssim"]["mean"],
        "minutes": (time.perf_counter() - t0) / 60,
    }


def test_c10_end_to_end_learning_signal(tmp_path):
    r = learning_signal_run(tmp_path, E2E_TRAIN, E2E_GUIDANCE)
    ok = (r["n_train"] >= 200 and r["steps"] <= 5000 and r["base_channels"] == 32
          and r["model_ssim"] >= r["base_ssim"] + 0.05 and r["loss_last"] < 0.5 * r["loss_first"]
          and r["minutes"] < 60)
    check(10, ok, f"{r['n_train']} train pairs, {r['steps']} steps, held-out SSIM "
                  f"{r['model_ssim']:.4f} vs identity {r['base_ssim']:.4f} (need +0.05), "
                  f"L_diff {r['loss_first']:.4f} -> {r['loss_last']:.4f}, {r['minutes']:.1f} min")


# --------------------------------------------------------------------------- 11 epoch ablation

def test_c11_epoch_ablation(tmp_path):
    root = tmp_path / "toy"
    manifest = make_toy_dataset(root, seeds=(0, 1), frames=130, stride=1,
                                fractions=(4 / 6, 1 / 6, 1 / 6))
    cfg = ExperimentConfig.from_dict({**TINY_CONFIG, "train": {
        "stage_resolutions": [32], "stage_epochs": [1], "batch_size": 4, "codec_steps": 800,
        "codec_batch_size": 8, "warmup_steps": 5, "learning_rate": 5e-3, "keep_checkpoints": 1}})
    rows = run_epoch_ablation(root, manifest, cfg, [2, 10], SamplerConfig(num_steps=20, guidance=1.0),
                              tmp_path / "ablation", split="train")
    ssims = [r["ssim_mean"] for r in rows]
    files = all((tmp_path / "ablation" / f).exists()
                for f in ("ablation.csv", "ablation.json", "ablation.png"))
    check(11, files and ssims[1] >= ssims[0],
          f"SSIM at 2 epochs={ssims[0]:.4f}, at 10 epochs={ssims[1]:.4f}, outputs written={files}")


# --------------------------------------------------------------------------- 12 determinism

def _pipeline(workdir: Path, monkeypatch) -> None:
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    Path("cfg.json").write_text(json.dumps(TINY_CONFIG))
    common = ["--seed", "12", "--threads", "1"]
    assert run(["gen-episodes", "--task", "all", "--episodes", "2", "--frames", "130",
                "--resolution", "128", "--out", "eps", *common]) == 0
    assert run(["build-dataset", "--episodes-dir", "eps", "--splits", "0.5,0.25,0.25",
                "--out", "ds", *common]) == 0
    assert run(["train", "--dataset", "ds", "--out", "run", "--config", "cfg.json",
                "--resolutions", "16", "--epochs", "2", "--batch-size", "4",
                "--codec-steps", "20", *common]) == 0
    assert run(["predict", "--checkpoint", "run/last.ckpt", "--image", "eps/stack_s00012/3.png",
                "--instruction", "stack blocks", "--steps", "5", "--out", "pred.png",
                *common]) == 0
    assert run(["evaluate", "--checkpoint", "run/last.ckpt", "--dataset", "ds", "--steps", "5",
                "--report", "report", *common]) == 0


def test_c12_determinism(tmp_path, monkeypatch):
    _pipeline(tmp_path / "a", monkeypatch)
    _pipeline(tmp_path / "b", monkeypatch)
    artifacts = ["run/last.ckpt", "run/checkpoints/epoch_001.ckpt", "pred.png",
                 "report/report.json", "report/report.csv"]
    same = {f: filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
            for f in artifacts}
    check(12, all(same.values()),
          "bit-identical: " + ", ".join(f"{k}={v}" for k, v in same.items()))
