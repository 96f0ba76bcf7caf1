"""Training loop: SGD semantics, schedules, determinism, resume, audit guard."""

import hashlib

import numpy as np
import pytest

from cpcd.autodiff import Tensor
from cpcd.data import DatasetSpec, generate_synthetic_dataset
from cpcd.encoder import EncoderConfig
from cpcd.losses import LossConfig
from cpcd.trainer import (METRICS_HEADER, NonFiniteGradientError, TrainConfig,
                          lr_schedule, sgd_step, train_pretext)

TINY_ENC = EncoderConfig(conv_channels=(4,), feature_dim=8, head_dim=8, patch_count=4)


def tiny_dataset(seed=0, n_per_class=8, image_size=8):
    return generate_synthetic_dataset(
        DatasetSpec(n_classes=4, samples_per_class=n_per_class, image_size=image_size, seed=seed))


def tiny_config(**overrides):
    defaults = dict(batch_size=16, max_epochs=2, seed=0,
                    loss=LossConfig(k_clusters=2, n_neg=8))
    defaults.update(overrides)
    return TrainConfig(**defaults)


# --- sgd and schedule --------------------------------------------------------


def test_sgd_hand_example():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0])
    sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [0.8])
    assert p.grad is None


def test_sgd_zero_grad_no_change():
    p = Tensor([1.5], requires_grad=True)
    sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [1.5])


def test_sgd_aborts_atomically_on_non_finite():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    a.grad = np.array([1.0])
    b.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradientError):
        sgd_step([a, b], 0.1)
    np.testing.assert_allclose(a.data, [1.0])       # untouched


def test_sgd_quadratic_bowl_converges():
    from cpcd import autodiff as ad
    from cpcd.autodiff import backward

    p = Tensor([5.0, -3.0], requires_grad=True)
    for _ in range(100):
        backward(ad.tensor_sum(ad.mul(p, p)))
        sgd_step([p], 0.1)
    assert np.abs(p.data).max() < 1e-6


def test_lr_schedule_values():
    assert lr_schedule(0, 1e-3) == 1e-3
    assert lr_schedule(500, 1e-3, "pretext") == 1e-3
    assert lr_schedule(20, 1e-4, "finetune") == pytest.approx(9e-5)
    assert lr_schedule(45, 1e-4, "finetune") == pytest.approx(8.1e-5)
    with pytest.raises(ValueError):
        lr_schedule(-1, 1e-3)
    with pytest.raises(ValueError):
        lr_schedule(0, 1e-3, "bogus")


# --- full loop ---------------------------------------------------------------


def test_step_and_bank_update_counts(tmp_path):
    ds = tiny_dataset(n_per_class=16)       # 64 samples
    result = train_pretext(ds, tiny_config(batch_size=32), TINY_ENC, tmp_path)
    assert result.state.step == 4           # 2 steps/epoch * 2 epochs
    assert result.state.bank_updates == 2
    lines = result.metrics_path.read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 5


def test_metrics_columns_parse(tmp_path):
    ds = tiny_dataset()
    result = train_pretext(ds, tiny_config(), TINY_ENC, tmp_path)
    lines = result.metrics_path.read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    assert header == ["step", "epoch", "nce_image", "nce_patch", "nce_total",
                      "gcld", "cpcd", "lr", "clamp_count"]
    parsed = dict(zip(header, row))
    assert int(parsed["step"]) == 1
    lam_prime = 0.5
    total = lam_prime * float(parsed["gcld"]) + (1 - lam_prime) * float(parsed["nce_total"])
    assert float(parsed["cpcd"]) == pytest.approx(total, abs=1e-9)


def test_full_run_determinism(tmp_path):
    ds = tiny_dataset()
    r1 = train_pretext(ds, tiny_config(), TINY_ENC, tmp_path / "a")
    r2 = train_pretext(ds, tiny_config(), TINY_ENC, tmp_path / "b")
    assert r1.final_checkpoint.read_bytes() == r2.final_checkpoint.read_bytes()
    assert r1.metrics_path.read_text() == r2.metrics_path.read_text()


def test_seed_changes_run(tmp_path):
    ds = tiny_dataset()
    r1 = train_pretext(ds, tiny_config(seed=0), TINY_ENC, tmp_path / "a")
    r2 = train_pretext(ds, tiny_config(seed=1), TINY_ENC, tmp_path / "b")
    assert r1.final_checkpoint.read_bytes() != r2.final_checkpoint.read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    ds = tiny_dataset()
    full = train_pretext(ds, tiny_config(max_epochs=3), TINY_ENC, tmp_path / "full")
    part = train_pretext(ds, tiny_config(max_epochs=1), TINY_ENC, tmp_path / "part")
    resumed = train_pretext(ds, tiny_config(max_epochs=3), TINY_ENC, tmp_path / "resumed",
                            resume_from=part.final_checkpoint)
    assert resumed.final_checkpoint.read_bytes() == full.final_checkpoint.read_bytes()
    full_rows = full.metrics_path.read_text().splitlines()
    resumed_rows = resumed.metrics_path.read_text().splitlines()
    assert resumed_rows[-1] == full_rows[-1]


def test_labels_never_read_during_training(tmp_path, monkeypatch):
    ds = tiny_dataset()
    reads = []
    original = type(ds.samples[0]).latent_class.fget

    def spy(self):
        reads.append(self.id)
        return original(self)

    monkeypatch.setattr(type(ds.samples[0]), "latent_class", property(spy))
    train_pretext(ds, tiny_config(max_epochs=1), TINY_ENC, tmp_path)
    assert reads == []


def test_label_read_inside_loop_would_fail(tmp_path):
    from cpcd.data import LabelAccessError, forbid_label_reads

    ds = tiny_dataset()
    with forbid_label_reads():
        with pytest.raises(LabelAccessError):
            _ = ds.samples[0].latent_class


def test_geometry_validation(tmp_path):
    ds = tiny_dataset(image_size=8)
    with pytest.raises(ValueError, match="does not fit"):
        train_pretext(ds, tiny_config(patch_size=5), TINY_ENC, tmp_path)
    bad_enc = EncoderConfig(conv_channels=(4,), feature_dim=8, head_dim=8, patch_count=9)
    with pytest.raises(ValueError, match="patches"):
        train_pretext(ds, tiny_config(), bad_enc, tmp_path)


def test_batch_vs_cluster_validation():
    with pytest.raises(ValueError, match="twice"):
        TrainConfig(batch_size=6, loss=LossConfig(k_clusters=4))


def test_best_checkpoint_written(tmp_path):
    ds = tiny_dataset()
    result = train_pretext(ds, tiny_config(max_epochs=3), TINY_ENC, tmp_path)
    assert result.best_checkpoint.exists()
    assert result.final_checkpoint.exists()
    from cpcd.checkpoint import load_checkpoint

    tensors, config = load_checkpoint(result.final_checkpoint)
    assert "memory_bank" in tensors
    assert tensors["memory_bank"].shape == (32, 8)
    assert config["state"]["epoch"] == 3
    assert config["train"]["loss"]["tau"] == 0.4


def test_early_stopping_on_plateau(tmp_path):
    ds = tiny_dataset()
    config = tiny_config(max_epochs=30, patience=2, min_improvement=1e9)
    result = train_pretext(ds, config, TINY_ENC, tmp_path)
    # nothing can improve by 1e9: the first epoch sets best, then patience runs out
    assert result.stopped_early
    assert result.state.epoch <= 4
