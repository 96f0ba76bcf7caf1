"""Run configuration: one structured file, validated, with flag overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .encoder import EncoderConfig
from .probe import ProbeConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    data_dir: str | None = None      # load instead of regenerating when set

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "probe": {
                "folds": self.probe.folds, "learning_rate": self.probe.learning_rate,
                "epochs": self.probe.epochs, "seed": self.probe.seed,
                "features": self.probe.features,
            },
            "data_dir": self.data_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(
                dataset=DatasetSpec.from_dict(d.get("dataset", DatasetSpec().to_dict())),
                encoder=EncoderConfig.from_dict(d.get("encoder", EncoderConfig().to_dict())),
                train=TrainConfig.from_dict(d.get("train", TrainConfig().to_dict())),
                probe=ProbeConfig(**d.get("probe", {})),
                data_dir=d.get("data_dir"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        patch = self.train.patch_size or self.dataset.image_size // self.train.grid
        if self.train.grid * patch > self.dataset.image_size:
            raise ConfigError(
                f"patch geometry {self.train.grid}x{patch} exceeds {self.dataset.image_size}px images")
        if self.encoder.patch_count != self.train.grid ** 2:
            raise ConfigError(
                f"encoder patch_count {self.encoder.patch_count} != grid^2 = {self.train.grid ** 2}")
        if self.encoder.in_channels != self.dataset.channels:
            raise ConfigError(
                f"encoder expects {self.encoder.in_channels} channels, dataset has {self.dataset.channels}")
        if self.train.batch_size > self.dataset.n_samples:
            raise ConfigError(
                f"batch_size {self.train.batch_size} exceeds dataset size {self.dataset.n_samples}")


def load_run_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


def apply_overrides(config: RunConfig, args) -> RunConfig:
    """Fold recognized CLI flags into the config; None flags are no-ops."""
    d = config.to_dict()
    if getattr(args, "seed", None) is not None:
        d["dataset"]["seed"] = args.seed
        d["train"]["seed"] = args.seed
        d["probe"]["seed"] = args.seed
    if getattr(args, "loss", None) is not None:
        arm = {"nce": "nce", "nce+gcld": "nce+gcld", "cpcd": "cpcd"}[args.loss]
        from .losses import LossConfig

        d["train"]["loss"] = LossConfig.from_dict(d["train"]["loss"]).for_arm(arm).to_dict()
    if getattr(args, "lambda_", None) is not None:
        d["train"]["loss"]["lam"] = args.lambda_
    if getattr(args, "tau", None) is not None:
        d["train"]["loss"]["tau"] = args.tau
    if getattr(args, "margin", None) is not None:
        d["train"]["loss"]["margin"] = args.margin
    if getattr(args, "scale", None) is not None:
        d["train"]["loss"]["scale"] = args.scale
    if getattr(args, "k", None) is not None:
        d["train"]["loss"]["k_clusters"] = args.k
    if getattr(args, "epochs", None) is not None:
        d["train"]["max_epochs"] = args.epochs
    if getattr(args, "data", None) is not None:
        d["data_dir"] = args.data
    return RunConfig.from_dict(d)


def echo_config(config: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
