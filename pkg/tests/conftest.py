import numpy as np
import pytest
import torch

from frameforecast.codec import CodecConfig
from frameforecast.dataset import apply_prompt_template
from frameforecast.diffusion import FuturePredictor, make_schedule
from frameforecast.diffusion.unet import DenoiserConfig
from frameforecast.episodes import TASK_PROMPTS, TASKS
from frameforecast.text import Vocabulary

PROMPTS = [apply_prompt_template(TASK_PROMPTS[t]) for t in TASKS]

TINY_CODEC = CodecConfig(hidden=(8, 8))
TINY_DENOISER = DenoiserConfig(base_channels=8, channel_mult=(1, 2), attention_resolutions=(1, 2),
                               num_heads=2, context_dim=16, norm_groups=4)
TINY_CONFIG = {
    "codec": {"hidden": [8, 8]},
    "denoiser": {"base_channels": 8, "channel_mult": [1, 2], "attention_resolutions": [1, 2],
                 "num_heads": 2, "context_dim": 16, "norm_groups": 4},
}


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return FuturePredictor(Vocabulary.from_texts(PROMPTS), TINY_CODEC, TINY_DENOISER,
                           make_schedule()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_toy_dataset(root, tasks=TASKS, seeds=(0, 1), frames=120, resolution=32, stride=10,
                     fractions=(0.5, 0.25, 0.25)):
    from frameforecast.dataset import build_pairs, split_dataset, write_instructpix2pix_layout
    from frameforecast.episodes import SyntheticSceneSpec, render_synthetic_episode

    eps, pairs = {}, []
    for task in tasks:
        for seed in seeds:
            ep = render_synthetic_episode(SyntheticSceneSpec(task, seed, frames, resolution))
            eps[ep.episode_id] = ep
            pairs += build_pairs(ep, 100, stride)
    m = write_instructpix2pix_layout(pairs, eps, root)
    m = split_dataset(m, fractions, 0)
    m.save(root)
    return m


def toy_config(**train):
    from frameforecast.config import ExperimentConfig

    base = {"stage_resolutions": [16], "stage_epochs": [2], "batch_size": 4, "codec_steps": 20,
            "codec_batch_size": 4, "warmup_steps": 3, "learning_rate": 1e-3}
    base.update(train)
    return ExperimentConfig.from_dict({**TINY_CONFIG, "train": base})


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return root, make_toy_dataset(root)


_ACCEPTANCE_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE_LINES.extend(line for line in report.capstdout.splitlines()
                                 if line.startswith("criterion "))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
