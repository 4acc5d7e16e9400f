from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ENV_LOG_LEVEL, RunConfig, apply_overrides, config_to_ini, load_config
from .errors import ConfigurationError, DataError, EmptyInputError, NumericError, TrainingAborted, exit_code_for
from .evaluation import (
    SWEEP_AXES,
    SweepRow,
    ablation,
    curves_to_csv,
    eval_scenarios,
    evaluate_run,
    infer_scenarios,
    report_to_csv,
    step_ssim_correlation,
    sweep_eval,
    train_run,
)
from .fusion import Challenge, synth_scenario
from .metrics import SSIM_WINDOW, ssim
from .seeding import make_rng
from .storage import encode_record, load_checkpoint, save_checkpoint, write_scenario
from .tensor import set_precision
from .trainers import TrainState, loss_log_to_csv

logger = logging.getLogger("gmmt")

CHECKPOINT_NAME = "checkpoint.gmck"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
GOLDEN_SEED = 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmt", description="Generative multi-modal feature fusion on a toy tracking world.")
    parser.add_argument("--log-level", default=None, help="Logging level (default INFO, or $GMMT_LOG_LEVEL).")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars.")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, help="INI run config.")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--mode", choices=["base", "raw", "cgan", "dm"])
        sub.add_argument("--steps", type=int, help="Reverse diffusion steps at inference.")
        sub.add_argument("--lambda", dest="lambda_gen", type=float, help="Weight of the generative loss.")
        sub.add_argument("--blocks", type=int, help="Encoder/decoder block count of the denoiser.")
        sub.add_argument("--epochs", type=int)
        sub.add_argument("--steps-per-epoch", type=int)
        sub.add_argument("--out", type=str, help="Output directory (overrides [run] out_dir).")

    def add_checkpoint(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--checkpoint", type=Path, help=f"Checkpoint to load (default <out>/{CHECKPOINT_NAME}).")

    train = commands.add_parser("train", help="Train one mode and write a checkpoint plus loss log.")
    add_common(train)

    infer = commands.add_parser("infer", help="Dump fused features for the held-out scenarios.")
    add_common(infer)
    add_checkpoint(infer)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint on the held-out scenarios.")
    add_common(evaluate)
    add_checkpoint(evaluate)

    ablate = commands.add_parser("ablate", help="Train and evaluate BASE, RAW, CGAN and DM.")
    add_common(ablate)

    sweep = commands.add_parser("sweep", help="Evaluate along the s, lambda or blocks axis.")
    add_common(sweep)
    add_checkpoint(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", type=str, help="Comma-separated axis values.")

    goldens = commands.add_parser("goldens", help="Regenerate the golden scenario records.")
    add_common(goldens)
    goldens.add_argument("--force", action="store_true", help="Required: overwrite golden files.")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < environment < flags."""
    config = load_config(args.config)
    config = apply_overrides(
        config,
        seed=args.seed,
        mode=args.mode,
        steps=args.steps,
        lambda_gen=args.lambda_gen,
        blocks=args.blocks,
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        out_dir=args.out,
    )
    config.validate()
    return config


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    logger.info("Wrote %s", path)
    return path


def _load_trained(args: argparse.Namespace, config: RunConfig) -> tuple[TrainState, RunConfig]:
    """Load the checkpoint and merge run-time flags into its stored config."""
    path = args.checkpoint or Path(config.out_dir) / CHECKPOINT_NAME
    architecture_given = args.config is not None or args.blocks is not None
    state, stored = load_checkpoint(path, expected=config if architecture_given else None)
    if args.mode is not None and state.pipeline.mode.value != args.mode:
        raise ConfigurationError(f"Checkpoint holds a {state.pipeline.mode.value} model, not {args.mode}.")
    if args.config is not None:
        stored = dataclasses.replace(stored, scenario=config.scenario, metrics=config.metrics, inference=config.inference)
    merged = dataclasses.replace(
        apply_overrides(stored, seed=args.seed, steps=args.steps, out_dir=config.out_dir),
        precision=config.precision,
        threads=config.threads,
    )
    merged.validate()
    return state, merged


def cmd_train(args: argparse.Namespace, config: RunConfig, progress: bool) -> int:
    out = Path(config.out_dir)
    checkpoint = out / CHECKPOINT_NAME
    _write_text(out / "config.ini", config_to_ini(config))
    try:
        result = train_run(config, save_state=lambda state: save_checkpoint(checkpoint, state, config), progress=progress)
    except TrainingAborted as exc:
        if exc.checkpoint_path is not None:
            logger.error("Last good state saved to %s", exc.checkpoint_path)
        raise
    _write_text(out / "loss_log.csv", loss_log_to_csv(result.records))
    return 0


def cmd_infer(args: argparse.Namespace, config: RunConfig, progress: bool) -> int:
    state, config = _load_trained(args, config)
    scenarios = eval_scenarios(config)
    outcomes = infer_scenarios(state.pipeline, scenarios, config.inference, config.seed, config.threads)
    out = Path(config.out_dir) / "features"
    out.mkdir(parents=True, exist_ok=True)

    summary = io.StringIO()
    writer = csv.writer(summary, lineterminator="\n")
    writer.writerow(["index", "challenge", "mse_vs_oracle", "ssim_vs_oracle"])
    for index, (scenario, outcome) in enumerate(zip(scenarios, outcomes)):
        record = encode_record(scenario.f_rgb, scenario.f_tir, outcome.fused, scenario.bbox, scenario.challenge)
        (out / f"{index:05d}.gmmt").write_bytes(record)
        error = float(np.mean((outcome.fused - scenario.fused_oracle) ** 2))
        similarity = ssim(outcome.fused, scenario.fused_oracle) if min(outcome.fused.shape[-2:]) >= SSIM_WINDOW else None
        writer.writerow(
            [index, scenario.challenge.value, f"{error:.6e}", "" if similarity is None else f"{similarity:.4f}"]
        )
    logger.info("Wrote %d feature records to %s", len(outcomes), out)
    _write_text(Path(config.out_dir) / "infer_summary.csv", summary.getvalue())
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig, progress: bool) -> int:
    state, config = _load_trained(args, config)
    scenarios = eval_scenarios(config)
    if not scenarios:
        raise EmptyInputError("The evaluation scenario set is empty (eval_count = 0).")
    report = evaluate_run(config, state.pipeline, scenarios)
    out = Path(config.out_dir)
    _write_text(out / "report.csv", report_to_csv([SweepRow("method", state.pipeline.mode.value, report)]))
    _write_text(out / "curves.csv", curves_to_csv(report))
    return 0


def cmd_ablate(args: argparse.Namespace, config: RunConfig, progress: bool) -> int:
    rows = ablation(config, progress=progress)
    _write_text(Path(config.out_dir) / "ablation.csv", report_to_csv(rows))
    return 0


def cmd_sweep(args: argparse.Namespace, config: RunConfig, progress: bool) -> int:
    values = None
    if args.values:
        values = [item.strip() for item in args.values.split(",") if item.strip()]
        if not values:
            raise ConfigurationError("--values lists no values.")
    pipeline = None
    if args.axis == "s" and (args.checkpoint is not None or (Path(config.out_dir) / CHECKPOINT_NAME).exists()):
        state, config = _load_trained(args, config)
        pipeline = state.pipeline
    rows = sweep_eval(config, args.axis, values, pipeline=pipeline, progress=progress)
    if args.axis == "s" and len(rows) > 1:
        logger.info("Spearman(s, ssim) = %.4f", step_ssim_correlation(rows))
    _write_text(Path(config.out_dir) / f"sweep_{args.axis}.csv", report_to_csv(rows))
    return 0


def cmd_goldens(args: argparse.Namespace, config: RunConfig, progress: bool) -> int:
    if not args.force:
        raise ConfigurationError("goldens overwrites reference files; pass --force to proceed.")
    out = Path(config.out_dir) / "goldens"
    for index, challenge in enumerate(Challenge):
        scenario = synth_scenario(make_rng(GOLDEN_SEED, index), challenge, config.denoiser.feature_shape, config.scenario)
        path = write_scenario(out / f"{challenge.value}.gmmt", scenario)
        logger.info("Wrote golden %s", path)
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "goldens": cmd_goldens,
}


def configure_logging(level: str | None) -> None:
    name = (level or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ConfigurationError(f"Unknown log level {level!r}.")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        config = resolve_config(args)
        set_precision(config.precision)
        progress = not args.quiet and sys.stderr.isatty()
        return COMMANDS[args.command](args, config, progress)
    except (ConfigurationError, DataError, NumericError) as exc:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
