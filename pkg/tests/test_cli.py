"""Command-line interface: subcommands, exit codes, artifacts, overrides."""

import json

import numpy as np
import pytest

from cpcd.cli import main
from cpcd.data import read_dataset

SMALL_CONFIG = {
    "dataset": {"n_classes": 4, "samples_per_class": 8, "image_size": 8,
                "channels": 3, "frequencies": None, "orientations": None,
                "noise_level": 0.45, "amplitude": 0.5, "seed": 0},
    "encoder": {"in_channels": 3, "conv_channels": [4], "kernel_size": 3,
                "feature_dim": 8, "head_dim": 8, "patch_count": 4},
    "train": {"learning_rate": 1e-3, "batch_size": 16, "max_epochs": 2,
              "patience": 50, "min_improvement": 1e-4, "seed": 0,
              "lr_mode": "pretext", "jitter_strength": 0.4, "grid": 2,
              "patch_size": None,
              "loss": {"tau": 0.4, "margin": 0.5, "scale": 6.0, "lam": 0.5,
                       "lam_prime": 0.5, "k_clusters": 2, "n_neg": 8,
                       "kmeans_iters": 10, "second_term": "estimator"}},
    "probe": {"folds": 4, "learning_rate": 1e-4, "epochs": 50, "seed": 0,
              "features": "encoder"},
    "data_dir": None,
}


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


def test_synth_writes_dataset_and_refuses_overwrite(tmp_path, config_path, capsys):
    out = tmp_path / "ds"
    assert main(["synth", "--config", config_path, "--out", str(out)]) == 0
    assert (out / "manifest.txt").exists()
    assert len(list(out.glob("sample_*.bin"))) == 32
    assert main(["synth", "--config", config_path, "--out", str(out)]) == 1
    assert main(["synth", "--config", config_path, "--out", str(out), "--force"]) == 0


def test_synth_seed_changes_hash(tmp_path, config_path):
    main(["synth", "--config", config_path, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["synth", "--config", config_path, "--out", str(tmp_path / "b"), "--seed", "2"])
    main(["synth", "--config", config_path, "--out", str(tmp_path / "c"), "--seed", "1"])
    a = read_dataset(tmp_path / "a")
    b = read_dataset(tmp_path / "b")
    c = read_dataset(tmp_path / "c")
    assert a.pixel_hash() != b.pixel_hash()
    assert a.pixel_hash() == c.pixel_hash()


def test_pretrain_produces_artifacts(tmp_path, config_path):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", config_path, "--out", str(out)]) == 0
    assert (out / "checkpoint_final.bin").exists()
    assert (out / "effective_config.json").exists()
    assert (out / "run_info.json").exists()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,epoch,nce_image,nce_patch,nce_total,gcld,cpcd,lr,clamp_count"


def test_pretrain_determinism_across_invocations(tmp_path, config_path):
    main(["pretrain", "--config", config_path, "--out", str(tmp_path / "r1")])
    main(["pretrain", "--config", config_path, "--out", str(tmp_path / "r2")])
    assert (tmp_path / "r1" / "checkpoint_final.bin").read_bytes() == \
        (tmp_path / "r2" / "checkpoint_final.bin").read_bytes()
    assert (tmp_path / "r1" / "metrics.csv").read_text() == \
        (tmp_path / "r2" / "metrics.csv").read_text()


def test_loss_flag_ablation_arm(tmp_path, config_path):
    out = tmp_path / "nce_run"
    assert main(["pretrain", "--config", config_path, "--out", str(out),
                 "--loss", "nce"]) == 0
    effective = json.loads((out / "effective_config.json").read_text())
    loss = effective["train"]["loss"]
    assert loss["lam_prime"] == 0.0 and loss["margin"] == 0.0 and loss["scale"] == 1.0
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    gcld_col = [float(r.split(",")[5]) for r in rows]
    assert all(v == 0.0 for v in gcld_col)


def test_flag_overrides_echoed(tmp_path, config_path):
    out = tmp_path / "ovr"
    assert main(["pretrain", "--config", config_path, "--out", str(out),
                 "--tau", "0.6", "--lambda", "0.25", "--margin", "0.3",
                 "--scale", "2", "--k", "2", "--epochs", "1"]) == 0
    loss = json.loads((out / "effective_config.json").read_text())["train"]["loss"]
    assert loss["tau"] == 0.6 and loss["lam"] == 0.25
    assert loss["margin"] == 0.3 and loss["scale"] == 2.0


def test_probe_subcommand(tmp_path, config_path):
    run = tmp_path / "run"
    main(["pretrain", "--config", config_path, "--out", str(run)])
    out = tmp_path / "probe"
    code = main(["probe", "--config", config_path, "--checkpoint",
                 str(run / "checkpoint_final.bin"), "--out", str(out)])
    assert code == 0
    csv = (out / "probe_metrics.csv").read_text()
    assert "qwk" in csv.splitlines()[0]


def test_probe_on_dataset_directory(tmp_path, config_path):
    ds_dir = tmp_path / "ds"
    main(["synth", "--config", config_path, "--out", str(ds_dir)])
    run = tmp_path / "run"
    main(["pretrain", "--config", config_path, "--out", str(run), "--data", str(ds_dir)])
    out = tmp_path / "probe"
    assert main(["probe", "--config", config_path, "--checkpoint",
                 str(run / "checkpoint_final.bin"), "--data", str(ds_dir),
                 "--out", str(out)]) == 0


def test_validation_errors_exit_1(tmp_path):
    bad = json.loads(json.dumps(SMALL_CONFIG))
    bad["train"]["loss"]["tau"] = -1.0
    bad_path = tmp_path / "bad.json"
    bad_path.write_text(json.dumps(bad))
    assert main(["pretrain", "--config", str(bad_path), "--out", str(tmp_path / "x")]) == 1


def test_missing_checkpoint_exit_2(tmp_path, config_path):
    code = main(["probe", "--config", config_path, "--checkpoint",
                 str(tmp_path / "nope.bin"), "--out", str(tmp_path / "p")])
    assert code == 2


def test_verify_subcommand_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "all checks passed" in out
    assert out.count("[PASS]") >= 8


def test_verify_detects_injected_sign_error(monkeypatch):
    # give the margin chain's cosine a wrong-sign derivative rule; the
    # loss-level gradient check must catch the forward/backward mismatch
    import numpy as np

    import cpcd.losses as losses_mod
    from cpcd import autodiff as ad
    from cpcd.verify import VerificationReport, check_loss_gradient_embeddings

    def broken_cos(a):
        a = ad._as_tensor(a)

        def vjp(g):
            return (g * np.sin(a.data),)   # sign flipped

        return ad._result(np.cos(a.data), (a,), vjp)

    monkeypatch.setattr(losses_mod.ad, "cos", broken_cos)
    report = VerificationReport()
    check_loss_gradient_embeddings(report, seed=0)
    assert not report.passed
