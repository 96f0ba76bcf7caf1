"""Command-line entry point.

Subcommands: synth, pretrain, probe, verify, ablate. Exit codes:
0 success, 1 validation error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import subprocess
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, echo_config, load_run_config
from .data import generate_synthetic_dataset, read_dataset, write_dataset

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default="runs/latest")
    parser.add_argument("--loss", choices=["nce", "nce+gcld", "cpcd"], default=None)
    parser.add_argument("--lambda", dest="lambda_", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--margin", type=float, default=None)
    parser.add_argument("--scale", type=float, default=None)
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--data", type=str, default=None, help="dataset directory")
    parser.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("synth", "generate a synthetic dataset directory"),
        ("pretrain", "run the pretext training loop"),
        ("probe", "linear-probe a checkpoint"),
        ("verify", "run the math verification suite"),
        ("ablate", "run loss arms and the (lambda, tau) sweep"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        if name == "probe":
            p.add_argument("--checkpoint", type=str, required=True)
        if name == "ablate":
            p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
            p.add_argument("--skip-sweep", action="store_true")
            p.add_argument("--skip-arms", action="store_true")
    return parser


def _provenance(out_dir: Path) -> None:
    try:
        describe = subprocess.run(["git", "describe", "--always", "--dirty"],
                                  capture_output=True, text=True, timeout=5,
                                  cwd=Path(__file__).parent)
        git_id = describe.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        git_id = "unknown"
    info = {"git": git_id, "timestamp": datetime.datetime.now().isoformat()}
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config)
    config = apply_overrides(config, args)
    config.validate()
    return config


def _dataset_for(config: RunConfig):
    if config.data_dir:
        return read_dataset(config.data_dir)
    return generate_synthetic_dataset(config.dataset)


def cmd_synth(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return EXIT_VALIDATION
    dataset = generate_synthetic_dataset(config.dataset)
    write_dataset(out, dataset)
    echo_config(config, out)
    print(f"wrote {len(dataset)} samples to {out} (pixel hash {dataset.pixel_hash()[:16]})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .trainer import train_pretext

    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(config, out)
    _provenance(out)
    dataset = _dataset_for(config)
    result = train_pretext(dataset, config.train, config.encoder, out)
    print(f"trained {result.state.epoch} epochs ({result.state.step} steps), "
          f"best epoch loss {result.state.best_loss:.6f}")
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"metrics:    {result.metrics_path}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probe import probe_checkpoint, write_probe_report

    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(config, out)
    dataset = _dataset_for(config)
    report = probe_checkpoint(args.checkpoint, dataset, config.probe)
    write_probe_report(report, out)
    metrics = " ".join(f"{k}={v:.4f}" for k, v in report.mean_metrics.items())
    print(f"probe ({config.probe.folds}-fold): {metrics}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification

    seed = args.seed if args.seed is not None else 0
    report = run_verification(seed=seed)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_VERIFICATION


def cmd_ablate(args) -> int:
    from .ablate import run_loss_arms, run_sweep

    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(config, out)
    _provenance(out)
    if not args.skip_arms:
        summary = run_loss_arms(config, args.seeds, out / "arms")
        for arm, stats in summary.items():
            print(f"{arm}: median top1 {stats['median_top1']:.4f}, median qwk {stats['median_qwk']:.4f}")
    if not args.skip_sweep:
        sweep_seed = args.seeds[0] if args.seeds else 0
        outcomes = run_sweep(config, sweep_seed, out / "sweep")
        print(f"sweep: {len(outcomes)} cells written to {out / 'sweep' / 'sweep.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"synth": cmd_synth, "pretrain": cmd_pretrain, "probe": cmd_probe,
                "verify": cmd_verify, "ablate": cmd_ablate}
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
