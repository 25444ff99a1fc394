import csv

import numpy as np
import pytest
import torch

from frameforecast.checkpoint import (FORMAT_VERSION, MAGIC, checkpoint_id, load_checkpoint,
                                      save_checkpoint)
from frameforecast.config import ExperimentConfig, TrainConfig, desk_config
from frameforecast.dataset import DatasetManifest
from frameforecast.diffusion import PeftPolicy, peft_mask
from frameforecast.errors import CheckpointError
from frameforecast.sampler import SamplerConfig, predict_future_frame
from frameforecast.trainer import resize_for_stage, run_training, train, warmup_factor
from conftest import PROMPTS, toy_config


# --------------------------------------------------------------------------- resizing

def test_resize_examples():
    const = np.full((128, 128, 3), 0.37, np.float32)
    np.testing.assert_allclose(resize_for_stage(const, 64), 0.37, atol=1e-7)
    img = np.random.default_rng(0).random((128, 128, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize_for_stage(img, 128), img)
    for r in (64, 48, 32, 20):
        out = resize_for_stage(img, r)
        assert out.shape == (r, r, 3) and out.min() >= 0 and out.max() <= 1
        assert abs(out.mean(dtype=np.float64) - img.mean(dtype=np.float64)) < 1e-6


def test_resize_block_average_oracle():
    img = np.random.default_rng(1).random((8, 8, 3))
    ref = img.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(resize_for_stage(img, 4), ref, atol=1e-6)


def test_resize_rejects_upsampling_and_bad_factor():
    with pytest.raises(ValueError, match="upsample"):
        resize_for_stage(np.zeros((64, 64, 3)), 128)
    with pytest.raises(ValueError, match="divisible"):
        resize_for_stage(np.zeros((64, 64, 3)), 30, factor=4)


def test_warmup_is_exact():
    assert [warmup_factor(s, 200) for s in (0, 1, 100, 199, 200, 5000)] == \
        [0.0, 1 / 200, 0.5, 199 / 200, 1.0, 1.0]
    assert warmup_factor(0, 0) == 1.0


# --------------------------------------------------------------------------- config

def test_config_roundtrip_and_validation(tmp_path):
    cfg = desk_config(learning_rate=3e-4)
    assert cfg.train.learning_rate == 3e-4 and cfg.train.weight_decay == 0.01
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()
    with pytest.raises(ValueError, match="unknown keys"):
        ExperimentConfig.from_dict({"train": {"lr": 1}})
    with pytest.raises(ValueError, match="unknown config sections"):
        ExperimentConfig.from_dict({"optimizer": {}})
    with pytest.raises(ValueError, match="divisible"):
        ExperimentConfig.from_dict({"train": {"stage_resolutions": [48], "stage_epochs": [1]}})
    with pytest.raises(ValueError):
        TrainConfig(mode="lora")
    with pytest.raises(ValueError):
        TrainConfig(keep_checkpoints=0)
    assert cfg.merged({"train": {"seed": None}}).train.seed == 0


# --------------------------------------------------------------------------- training

@pytest.fixture(scope="module")
def trained(toy_dataset, tmp_path_factory):
    root, manifest = toy_dataset
    out = tmp_path_factory.mktemp("run")
    ckpt, log = run_training(root, toy_config(), out)
    return root, manifest, out, ckpt, log


def test_training_writes_logs_and_checkpoints(trained):
    _, manifest, out, ckpt, log = trained
    for name in ("train_log.csv", "val.csv", "timing.csv", "last.ckpt", "config.json",
                 "loss_curves.png", "checkpoints/epoch_001.ckpt", "checkpoints/epoch_002.ckpt"):
        assert (out / name).exists(), name
    with open(out / "train_log.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss_total", "loss_diff", "loss_perc", "loss_adv"]
    steps = [int(r[0]) for r in rows[1:]]
    assert steps == list(range(len(steps))) and len(steps) == ckpt.step
    assert len(log.val) == 2 and ckpt.epoch == 2


def test_validation_uses_val_split_only(trained):
    _, manifest, _, _, log = trained
    assert log.val_ids == manifest.ids("val")
    assert not set(log.val_ids) & set(manifest.ids("train"))


def test_adversarial_term_starts_late(trained):
    _, _, _, ckpt, log = trained
    start = int(np.ceil(0.1 * len(log.steps)))
    for row in log.steps[:start]:
        assert row["loss_total"] == pytest.approx(row["loss_diff"] + 0.1 * row["loss_perc"], rel=1e-5)
    late = log.steps[-1]
    assert late["loss_total"] == pytest.approx(late["loss_diff"] + 0.1 * late["loss_perc"]
                                               + 0.01 * late["loss_adv"], rel=1e-5)


def test_codec_frozen_during_scratch_training(trained):
    _, _, _, ckpt, log = trained
    model = ckpt.build_model()
    assert len(log.codec) == 20
    assert model.codec.latent_scale.item() != 1.0


def test_checkpoint_roundtrip_bit_equal_prediction(trained, tmp_path):
    _, _, out, ckpt, _ = trained
    path = save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(path)
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    cfg = SamplerConfig(num_steps=4)
    np.testing.assert_array_equal(predict_future_frame(ckpt.build_model(), img, PROMPTS[0], cfg),
                                  predict_future_frame(back.build_model(), img, PROMPTS[0], cfg))
    assert back.step == ckpt.step and back.vocab == ckpt.vocab
    assert checkpoint_id(path) == checkpoint_id(path) and len(checkpoint_id(path)) == 16
    back.build_discriminator()


def test_truncated_checkpoint(trained, tmp_path):
    data = (trained[2] / "last.ckpt").read_bytes()
    for n in (10, len(data) // 2):
        p = tmp_path / f"t{n}.ckpt"
        p.write_bytes(data[:n])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)


def test_corrupt_and_foreign_checkpoints(trained, tmp_path):
    data = bytearray((trained[2] / "last.ckpt").read_bytes())
    data[-5] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"PK\x03\x04" + bytes(100))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_old_version_named_in_error(trained, tmp_path):
    ckpt = load_checkpoint(trained[2] / "last.ckpt")
    ckpt.version = 1
    save_checkpoint(ckpt, tmp_path / "v1.ckpt")
    assert (tmp_path / "v1.ckpt").read_bytes()[:8] == MAGIC
    with pytest.raises(CheckpointError, match=rf"version 1.*version {FORMAT_VERSION}"):
        load_checkpoint(tmp_path / "v1.ckpt")


def test_training_is_reproducible(toy_dataset, trained, tmp_path):
    root, manifest = toy_dataset
    run_training(root, toy_config(), tmp_path)
    out = trained[2]
    for name in ("last.ckpt", "train_log.csv", "val.csv", "checkpoints/epoch_001.ckpt"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_progressive_stages(toy_dataset, tmp_path):
    root, manifest = toy_dataset
    ckpt, log = train(root, manifest, toy_config(stage_resolutions=[16, 32], stage_epochs=[1, 1],
                                                 keep_checkpoints=1), tmp_path)
    assert [(v["stage"], v["resolution"]) for v in log.val] == [(0, 16), (1, 32)]
    assert ckpt.resolution == 32
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["epoch_002.ckpt"]


def test_finetune_mode_freezes_non_peft_parameters(trained, toy_dataset, tmp_path):
    root, manifest = toy_dataset
    init = trained[2] / "last.ckpt"
    ckpt, _ = train(root, manifest, toy_config(mode="finetune", init_checkpoint=str(init),
                                               stage_epochs=[1]), tmp_path)
    before = load_checkpoint(init)
    model = before.build_model()
    mask = peft_mask(model, PeftPolicy())
    changed = 0
    for name, _ in model.named_parameters():
        same = torch.equal(before.model_state[name], ckpt.model_state[name])
        if not mask[name]:
            assert same, name
        changed += not same
    assert changed > 0


def test_empty_splits_rejected(toy_dataset):
    root, manifest = toy_dataset
    no_val = DatasetManifest(manifest.samples, {k: ("train" if v == "val" else v)
                                                for k, v in manifest.splits.items()})
    with pytest.raises(ValueError, match="val"):
        train(root, no_val, toy_config())
    with pytest.raises(ValueError, match="finetune"):
        train(root, manifest, toy_config(mode="finetune"))
