"""Frozen-encoder linear probe with stratified cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import Dataset
from .encoder import Encoder, EncoderConfig, ProjectionHead
from .metrics import MetricsReport, compute_metrics, confusion_from_predictions, topk_accuracy


@dataclass
class ProbeConfig:
    folds: int = 5
    learning_rate: float = 1e-4
    epochs: int = 200
    seed: int = 0
    features: str = "encoder"     # "encoder" (pre-head) | "head" (post-projection)


@dataclass
class ProbeModel:
    """Linear classifier on standardized features.

    Standardization statistics come from the probe's training split, so
    evaluation folds see them as frozen constants.
    """

    weights: np.ndarray           # (d, n_classes)
    bias: np.ndarray              # (n_classes,)
    mean: np.ndarray
    std: np.ndarray

    def scores(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return z @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.scores(x).argmax(axis=1)


@dataclass
class ProbeReport:
    fold_reports: list[MetricsReport]
    mean_metrics: dict
    model: ProbeModel
    pooled_confusion: np.ndarray = field(default=None)


def load_encoder(checkpoint_path: str | Path) -> tuple[Encoder, ProjectionHead, dict]:
    tensors, config = load_checkpoint(checkpoint_path)
    encoder_cfg = EncoderConfig.from_dict(config["encoder"])
    encoder = Encoder(encoder_cfg, seed=0)
    for name, tensor in encoder.params.items():
        key = f"enc/{name}"
        if key not in tensors:
            raise ValueError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != tensor.data.shape:
            raise ValueError(f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                             f"encoder expects {tensor.data.shape}")
        tensor.data = tensors[key].copy()
    head = ProjectionHead(encoder_cfg.feature_dim, encoder_cfg.head_dim, name="f_head")
    for name, tensor in head.params.items():
        tensor.data = tensors[name].copy()
    return encoder, head, config


def extract_embeddings(checkpoint_path: str | Path, dataset: Dataset,
                       features: str = "encoder",
                       batch_size: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Un-augmented forward pass over the whole dataset.

    Returns (embeddings, labels, ids) ordered by dataset position. The
    default feature source is the encoder output before the projection
    head; ``features="head"`` switches to the projected space.
    """
    if features not in ("encoder", "head"):
        raise ValueError(f"unknown feature source {features!r}")
    encoder, head, config = load_encoder(checkpoint_path)
    size = dataset.samples[0].pixels.shape
    if size[2] != encoder.config.in_channels:
        raise ValueError(f"dataset has {size[2]} channels, checkpoint encoder expects "
                         f"{encoder.config.in_channels}")
    chunks = []
    for start in range(0, len(dataset), batch_size):
        block = np.stack([s.pixels for s in dataset.samples[start:start + batch_size]])
        feats = encoder.forward(block)
        if features == "head":
            feats = head.forward(feats)
        chunks.append(feats.data)
    labels = np.array([s.latent_class for s in dataset.samples])
    ids = np.array([s.id for s in dataset.samples])
    return np.concatenate(chunks), labels, ids


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Assign each index a fold so every class appears in every fold."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    assignment = np.empty(len(labels), dtype=int)
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if len(idx) < folds:
            raise ValueError(f"class {cls} has {len(idx)} samples, cannot stratify into {folds} folds")
        idx = rng.permutation(idx)
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def _fit_softmax(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float,
                 epochs: int) -> ProbeModel:
    """Full-batch gradient descent on softmax cross-entropy."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    z = (x - mean) / std
    n, d = z.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        logits = z @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= lr * (z.T @ delta)
        b -= lr * delta.sum(axis=0)
    return ProbeModel(weights=w, bias=b, mean=mean, std=std)


def train_probe(embeddings: np.ndarray, labels: np.ndarray,
                config: ProbeConfig | None = None) -> ProbeReport:
    """Cross-validated linear probe; the returned model is fit on all data."""
    config = config or ProbeConfig()
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    n_classes = int(y.max()) + 1
    assignment = stratified_folds(y, config.folds, config.seed)
    fold_reports = []
    pooled = np.zeros((n_classes, n_classes), dtype=int)
    for fold in range(config.folds):
        train_mask = assignment != fold
        model = _fit_softmax(x[train_mask], y[train_mask], n_classes,
                             config.learning_rate, config.epochs)
        scores = model.scores(x[~train_mask])
        preds = scores.argmax(axis=1)
        cm = confusion_from_predictions(y[~train_mask], preds, n_classes)
        pooled += cm
        fold_reports.append(compute_metrics(cm, scores=scores, labels=y[~train_mask]))
    mean_metrics = {}
    for key in ("top1", "top2", "f1_macro", "specificity_macro", "recall_macro", "qwk"):
        vals = [getattr(r, key) for r in fold_reports]
        mean_metrics[key] = float(np.mean([v for v in vals if v is not None]))
    final = _fit_softmax(x, y, n_classes, config.learning_rate, config.epochs)
    return ProbeReport(fold_reports=fold_reports, mean_metrics=mean_metrics,
                       model=final, pooled_confusion=pooled)


def probe_checkpoint(checkpoint_path: str | Path, dataset: Dataset,
                     config: ProbeConfig | None = None) -> ProbeReport:
    config = config or ProbeConfig()
    x, y, _ = extract_embeddings(checkpoint_path, dataset, features=config.features)
    return train_probe(x, y, config)


def write_probe_report(report: ProbeReport, out_dir: str | Path) -> None:
    """Dump the cross-validation report as CSV files and a text table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = "fold,top1,top2,f1_macro,specificity_macro,recall_macro,qwk"
    lines = [header]
    for i, rep in enumerate(report.fold_reports):
        row = rep.as_row()
        lines.append(",".join([str(i)] + [repr(float(row[k])) if row[k] is not None else ""
                                          for k in header.split(",")[1:]]))
    mean_row = ",".join(["mean"] + [repr(float(report.mean_metrics[k]))
                                    for k in header.split(",")[1:]])
    lines.append(mean_row)
    (out_dir / "probe_metrics.csv").write_text("\n".join(lines) + "\n")
    for i, rep in enumerate(report.fold_reports):
        np.savetxt(out_dir / f"confusion_fold{i}.csv", rep.confusion_matrix,
                   fmt="%d", delimiter=",")
    width = 22
    table = ["metric".ljust(width) + "mean"]
    for key, value in report.mean_metrics.items():
        table.append(key.ljust(width) + f"{value:.4f}")
    (out_dir / "probe_report.txt").write_text("\n".join(table) + "\n")
