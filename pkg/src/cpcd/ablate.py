"""Ablation harness: loss arms and the (lambda, tau) sweep.

Arms share seeds so comparisons are paired; every unit of work is a
self-contained pretrain-plus-probe run, so arms can execute in parallel
worker processes capped by the CPCD_THREADS environment variable.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate_synthetic_dataset, read_dataset
from .probe import probe_checkpoint
from .trainer import TrainConfig, train_pretext

ARMS = ("nce", "nce+gcld", "cpcd")
SWEEP_LAMBDAS = (0.1, 0.25, 0.5, 1.0)
SWEEP_TAUS = (0.2, 0.4, 0.6)


@dataclass
class RunOutcome:
    label: str
    seed: int
    top1: float
    qwk: float


def worker_count() -> int:
    cap = os.environ.get("CPCD_THREADS")
    if cap is None:
        return 1
    return max(1, int(cap))


def _single_run(payload: tuple) -> RunOutcome:
    label, seed, config_dict, out_dir = payload
    config = RunConfig.from_dict(config_dict)
    config.train.seed = seed
    config.dataset.seed = seed
    config.probe.seed = seed
    run_dir = Path(out_dir) / f"{label.replace('+', '_')}_seed{seed}"
    if config.data_dir:
        dataset = read_dataset(config.data_dir)
    else:
        dataset = generate_synthetic_dataset(config.dataset)
    result = train_pretext(dataset, config.train, config.encoder, run_dir)
    report = probe_checkpoint(result.final_checkpoint, dataset, config.probe)
    return RunOutcome(label=label, seed=seed,
                      top1=report.mean_metrics["top1"], qwk=report.mean_metrics["qwk"])


def _execute(payloads: list[tuple]) -> list[RunOutcome]:
    workers = min(worker_count(), len(payloads))
    if workers <= 1:
        return [_single_run(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_single_run, payloads))


def run_loss_arms(config: RunConfig, seeds, out_dir: str | Path) -> dict:
    """Train each loss arm on every seed and probe the result."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = []
    for arm in ARMS:
        arm_config = RunConfig.from_dict(config.to_dict())
        arm_config.train.loss = arm_config.train.loss.for_arm(arm)
        for seed in seeds:
            payloads.append((arm, int(seed), arm_config.to_dict(), str(out_dir)))
    outcomes = _execute(payloads)

    detail_lines = ["arm,seed,top1,qwk"]
    for o in outcomes:
        detail_lines.append(f"{o.label},{o.seed},{o.top1!r},{o.qwk!r}")
    (out_dir / "ablation_runs.csv").write_text("\n".join(detail_lines) + "\n")

    summary: dict[str, dict] = {}
    lines = ["arm,median_top1,median_qwk,n_seeds"]
    for arm in ARMS:
        tops = [o.top1 for o in outcomes if o.label == arm]
        qwks = [o.qwk for o in outcomes if o.label == arm]
        summary[arm] = {"median_top1": float(np.median(tops)),
                        "median_qwk": float(np.median(qwks)),
                        "top1": tops, "qwk": qwks}
        lines.append(f"{arm},{summary[arm]['median_top1']!r},{summary[arm]['median_qwk']!r},{len(tops)}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_sweep(config: RunConfig, seed: int, out_dir: str | Path,
              lambdas=SWEEP_LAMBDAS, taus=SWEEP_TAUS) -> list[RunOutcome]:
    """Grid over the loss weight and temperature, one run per cell."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = []
    for lam in lambdas:
        for tau in taus:
            cell = RunConfig.from_dict(config.to_dict())
            cell.train.loss = cell.train.loss.for_arm("cpcd")
            d = cell.train.loss.to_dict()
            d["lam"] = lam
            d["tau"] = tau
            from .losses import LossConfig

            cell.train.loss = LossConfig.from_dict(d)
            payloads.append((f"lam{lam}_tau{tau}", int(seed), cell.to_dict(), str(out_dir)))
    outcomes = _execute(payloads)
    lines = ["lambda,tau,top1,qwk"]
    idx = 0
    for lam in lambdas:
        for tau in taus:
            o = outcomes[idx]
            lines.append(f"{lam},{tau},{o.top1!r},{o.qwk!r}")
            idx += 1
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    return outcomes
