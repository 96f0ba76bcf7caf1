"""Pretext optimization loop: SGD over the composite loss.

Every random stream derives from (seed, epoch, batch) counters, so a run
is a pure function of its config and a resumed run replays exactly. The
label audit guard is active for the whole loop; reading a sample's class
anywhere on the pretext path fails the run.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .bank import MemoryBank
from .data import Dataset, batch_iterator, forbid_label_reads, geometric_flip, photometric_jitter
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import (EncoderConfig, all_parameters, build_model, encode_image,
                      encode_patches, normalize_embeddings, project)
from .losses import LossConfig, cpcd_loss

_STREAM_AUG = 0xA06
_STREAM_NEG = 0x9E6

METRICS_HEADER = "step,epoch,nce_image,nce_patch,nce_total,gcld,cpcd,lr,clamp_count"


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained NaN or Inf."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 50
    min_improvement: float = 1e-4
    seed: int = 0
    lr_mode: str = "pretext"          # constant; "finetune" decays 0.9x per 20 epochs
    jitter_strength: float = 0.4
    grid: int = 2
    patch_size: int | None = None     # default: image_size // grid
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2 * self.loss.k_clusters:
            raise ValueError(
                f"batch_size {self.batch_size} must be at least twice k_clusters={self.loss.k_clusters}")
        if self.lr_mode not in ("pretext", "finetune"):
            raise ValueError(f"unknown lr mode {self.lr_mode!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "min_improvement": self.min_improvement, "seed": self.seed,
            "lr_mode": self.lr_mode, "jitter_strength": self.jitter_strength,
            "grid": self.grid, "patch_size": self.patch_size,
            "loss": self.loss.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0            # completed epochs
    step: int = 0             # completed optimization steps
    best_loss: float = float("inf")
    bank_updates: int = 0


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    metrics_path: Path
    state: TrainState
    stopped_early: bool = False


def lr_schedule(epoch: int, base_lr: float, mode: str = "pretext") -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if mode == "pretext":
        return base_lr
    if mode == "finetune":
        return base_lr * 0.9 ** (epoch // 20)
    raise ValueError(f"unknown lr mode {mode!r}")


def sgd_step(params, lr: float) -> None:
    """p <- p - lr * grad for every parameter, then zero the grads.

    The whole step aborts before touching any parameter if any gradient
    is non-finite.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError("non-finite gradient; step aborted")
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
        p.grad = None


def _augment_batch(batch, jitter_strength: float, rng: np.random.Generator) -> np.ndarray:
    images = []
    for sample, _ in batch:
        img = geometric_flip(sample.pixels, bool(rng.random() < 0.5), bool(rng.random() < 0.5))
        img = photometric_jitter(img, jitter_strength, rng)
        images.append(img)
    return np.stack(images)


def _format_row(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def _checkpoint_payload(params: dict[str, Tensor], bank: MemoryBank,
                        encoder_cfg: EncoderConfig, train_cfg: TrainConfig,
                        dataset: Dataset, state: TrainState) -> tuple[dict, dict]:
    tensors = {name: t.data for name, t in params.items()}
    tensors["memory_bank"] = bank.rows
    config = {
        "encoder": encoder_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "dataset": dataset.spec.to_dict() if dataset.spec else None,
        "state": {"epoch": state.epoch, "step": state.step,
                  "best_loss": state.best_loss, "bank_updates": state.bank_updates},
    }
    return tensors, config


def train_pretext(dataset: Dataset, train_cfg: TrainConfig, encoder_cfg: EncoderConfig,
                  out_dir: str | Path, resume_from: str | Path | None = None) -> TrainResult:
    """Run the pretext task and write checkpoints plus a metrics log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_size = dataset.samples[0].pixels.shape[0]
    patch_size = train_cfg.patch_size or image_size // train_cfg.grid
    if train_cfg.grid * patch_size > image_size:
        raise ValueError(
            f"patch geometry {train_cfg.grid}x{patch_size} does not fit {image_size}px images")
    if encoder_cfg.patch_count != train_cfg.grid ** 2:
        raise ValueError(
            f"encoder expects {encoder_cfg.patch_count} patches but grid {train_cfg.grid} yields {train_cfg.grid ** 2}")

    encoder, image_head, patch_head = build_model(encoder_cfg, seed=train_cfg.seed)
    params = all_parameters(encoder, image_head, patch_head)
    bank = MemoryBank(len(dataset), encoder_cfg.head_dim, seed=train_cfg.seed)
    state = TrainState()

    if resume_from is not None:
        tensors, config = load_checkpoint(resume_from)
        for name, tensor in params.items():
            if name not in tensors:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != tensor.shape:
                raise ValueError(f"checkpoint parameter {name!r} has shape "
                                 f"{tensors[name].shape}, expected {tensor.shape}")
            tensor.data = tensors[name].copy()
        bank.rows = tensors["memory_bank"].copy()
        saved = config["state"]
        state = TrainState(epoch=saved["epoch"], step=saved["step"],
                           best_loss=saved["best_loss"], bank_updates=saved["bank_updates"])

    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "checkpoint_best.bin"
    final_path = out_dir / "checkpoint_final.bin"
    ad.DIAGNOSTICS.reset()

    if resume_from is not None and metrics_path.exists():
        rows = metrics_path.read_text().rstrip("\n").split("\n")
    else:
        rows = [METRICS_HEADER]

    stopped_early = False
    epochs_since_best = 0
    with forbid_label_reads():
        consecutive_aborts = 0
        for epoch in range(state.epoch, train_cfg.max_epochs):
            lr = lr_schedule(epoch, train_cfg.learning_rate, train_cfg.lr_mode)
            fresh_embeddings: dict[int, np.ndarray] = {}
            epoch_losses = []
            for batch_idx, batch in enumerate(batch_iterator(
                    dataset, train_cfg.batch_size, train_cfg.seed, epoch,
                    grid=train_cfg.grid, patch_size=patch_size,
                    jitter_strength=train_cfg.jitter_strength)):
                aug_rng = np.random.default_rng(
                    np.random.SeedSequence([train_cfg.seed, epoch, batch_idx, _STREAM_AUG]))
                neg_rng = np.random.default_rng(
                    np.random.SeedSequence([train_cfg.seed, epoch, batch_idx, _STREAM_NEG]))
                images = _augment_batch(batch, train_cfg.jitter_strength, aug_rng)
                patches = np.stack([ps.patches for _, ps in batch])
                ids = np.array([s.id for s, _ in batch])

                f_emb = normalize_embeddings(project(image_head, encode_image(encoder, images)))
                g_emb = normalize_embeddings(project(patch_head, encode_patches(encoder, patches)))
                breakdown = cpcd_loss(f_emb, g_emb, ids, bank, train_cfg.loss, neg_rng)

                if not np.isfinite(breakdown.cpcd.item()):
                    consecutive_aborts += 1
                    for p in params.values():
                        p.grad = None
                    if consecutive_aborts >= 3:
                        raise NonFiniteGradientError("3 consecutive aborted steps; training halted")
                    continue
                backward(breakdown.cpcd)
                try:
                    sgd_step(params.values(), lr)
                except NonFiniteGradientError:
                    consecutive_aborts += 1
                    for p in params.values():
                        p.grad = None
                    if consecutive_aborts >= 3:
                        raise NonFiniteGradientError("3 consecutive aborted steps; training halted")
                    continue
                consecutive_aborts = 0

                for row_idx, sample_id in enumerate(ids):
                    fresh_embeddings[int(sample_id)] = f_emb.data[row_idx].copy()
                state.step += 1
                epoch_losses.append(breakdown.cpcd.item())
                rows.append(_format_row([
                    state.step, epoch, breakdown.nce_image.item(), breakdown.nce_patch.item(),
                    breakdown.nce_total.item(), breakdown.gcld.item(), breakdown.cpcd.item(),
                    lr, breakdown.diagnostics.arccos_clamps,
                ]))

            skipped = bank.update_epoch(fresh_embeddings)
            if skipped:
                print(f"warning: epoch {epoch} skipped non-finite bank rows {skipped}", file=sys.stderr)
            state.bank_updates += 1
            state.epoch = epoch + 1

            epoch_mean = float(np.mean(epoch_losses)) if epoch_losses else float("inf")
            if state.best_loss - epoch_mean > train_cfg.min_improvement:
                state.best_loss = epoch_mean
                epochs_since_best = 0
                tensors, config = _checkpoint_payload(params, bank, encoder_cfg,
                                                      train_cfg, dataset, state)
                save_checkpoint(best_path, tensors, config)
            else:
                epochs_since_best += 1
                if epochs_since_best >= train_cfg.patience:
                    stopped_early = True
                    break

    tensors, config = _checkpoint_payload(params, bank, encoder_cfg, train_cfg, dataset, state)
    save_checkpoint(final_path, tensors, config)
    if not best_path.exists():
        save_checkpoint(best_path, tensors, config)
    metrics_path.write_text("\n".join(rows) + "\n")
    return TrainResult(final_checkpoint=final_path, best_checkpoint=best_path,
                       metrics_path=metrics_path, state=state, stopped_early=stopped_early)
