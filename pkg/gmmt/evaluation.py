from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr
from tqdm import tqdm

from .config import RunConfig
from .errors import ConfigurationError, EmptyInputError
from .fusion import (
    InferenceConfig,
    Mode,
    Pipeline,
    Prediction,
    Scenario,
    build_pipeline,
    fuse,
    stack_scenarios,
    synth_scenarios,
    track_head,
)
from .metrics import (
    NORM_PRECISION_THRESHOLDS,
    PRECISION_THRESHOLDS,
    SSIM_WINDOW,
    SUCCESS_THRESHOLDS,
    EvalReport,
    FramePair,
    MetricConfig,
    evaluate_frames,
    ssim,
)
from .seeding import make_rng
from .trainers import TrainResult, TrainState, train

logger = logging.getLogger(__name__)

# Sub-stream keys under the run seed; trainers own keys 1 and 2.
INFER_KEY = 3
EVAL_SET_KEY = 4
INFER_CHUNK = 16

SWEEP_AXES = ("s", "lambda", "blocks")
DEFAULT_STEP_VALUES = (1, 2, 3, 4, 5, 6, 7, 8, 9, 15, 20, 30, 40)
DEFAULT_LAMBDA_VALUES = (0.0, 1.0, 2.0, 3.0, 5.0, 10.0, 100.0)
DEFAULT_BLOCK_VALUES = (1, 2, 3)
ABLATION_MODES = (Mode.BASE, Mode.RAW, Mode.CGAN, Mode.DM)

REPORT_COLUMNS = ["axis_value", "pr", "npr", "sr_auc", "sr_ratio", "re", "f_score", "ssim_mean"]
CURVE_COLUMNS = ["curve", "threshold", "value"]


@dataclass
class Inferred:
    prediction: Prediction
    fused: np.ndarray


@dataclass
class SweepRow:
    axis: str
    value: float | int | str
    report: EvalReport


def eval_scenarios(config: RunConfig) -> list[Scenario]:
    """The held-out scenario set of a run; disjoint from the training stream."""
    return synth_scenarios(
        make_rng(config.seed, EVAL_SET_KEY), config.scenario.eval_count, config.denoiser.feature_shape, config.scenario
    )


def train_run(
    config: RunConfig,
    *,
    save_state: Callable[[TrainState], Path] | None = None,
    progress: bool = False,
) -> TrainResult:
    """Build a fresh pipeline for ``config.trainer.mode`` and train it."""
    config.validate()
    pipeline = build_pipeline(config.trainer.mode, config.denoiser, config.schedule.build(), make_rng(config.seed))
    return train(pipeline, config.trainer, config.scenario, config.seed, save_state=save_state, progress=progress)


def _infer_chunk(
    pipeline: Pipeline, chunk: Sequence[Scenario], inference: InferenceConfig, seed: int, index: int
) -> list[Inferred]:
    f_rgb, f_tir, _, _ = stack_scenarios(chunk)
    fused = fuse(pipeline, f_rgb, f_tir, inference, make_rng(seed, INFER_KEY, index))
    predictions = track_head(pipeline.head, fused)
    return [Inferred(prediction=prediction, fused=fused[k]) for k, prediction in enumerate(predictions)]


def infer_scenarios(
    pipeline: Pipeline,
    scenarios: Sequence[Scenario],
    inference: InferenceConfig,
    seed: int,
    threads: int = 1,
) -> list[Inferred]:
    """Fuse and track every scenario in fixed-size chunks.

    Each chunk draws from its own sub-stream, so results do not depend on ``threads``.
    """
    if not scenarios:
        raise EmptyInputError("No scenarios to run inference on.")
    chunks = [scenarios[start : start + INFER_CHUNK] for start in range(0, len(scenarios), INFER_CHUNK)]
    workers = max(1, min(threads, len(chunks)))
    if workers == 1:
        results = [_infer_chunk(pipeline, chunk, inference, seed, index) for index, chunk in enumerate(chunks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda item: _infer_chunk(pipeline, item[1], inference, seed, item[0]),
                    enumerate(chunks),
                )
            )
    return [outcome for chunk_results in results for outcome in chunk_results]


def _ssim_applies(scenario: Scenario) -> bool:
    return min(scenario.fused_oracle.shape[-2:]) >= SSIM_WINDOW


def evaluate_model(
    pipeline: Pipeline,
    scenarios: Sequence[Scenario],
    metric_config: MetricConfig,
    inference: InferenceConfig,
    seed: int,
    threads: int = 1,
) -> EvalReport:
    outcomes = infer_scenarios(pipeline, scenarios, inference, seed, threads)
    threshold = metric_config.absent_threshold
    frames = [
        FramePair(
            pred=outcome.prediction.bbox,
            truth=scenario.bbox,
            pred_present=threshold is None or outcome.prediction.peak >= threshold,
        )
        for outcome, scenario in zip(outcomes, scenarios)
    ]
    report = evaluate_frames(frames, metric_config)
    if _ssim_applies(scenarios[0]):
        report.ssim_mean = float(
            np.mean([ssim(outcome.fused, scenario.fused_oracle) for outcome, scenario in zip(outcomes, scenarios)])
        )
    return report


def evaluate_run(config: RunConfig, pipeline: Pipeline, scenarios: Sequence[Scenario] | None = None) -> EvalReport:
    scenarios = eval_scenarios(config) if scenarios is None else scenarios
    return evaluate_model(pipeline, scenarios, config.metrics, config.inference, config.seed, config.threads)


def _sweep_value(axis: str, raw: float | int | str) -> float | int:
    try:
        return float(raw) if axis == "lambda" else int(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"Invalid {axis} sweep value {raw!r}.") from exc


def default_values(axis: str) -> tuple[float | int, ...]:
    return {"s": DEFAULT_STEP_VALUES, "lambda": DEFAULT_LAMBDA_VALUES, "blocks": DEFAULT_BLOCK_VALUES}[axis]


def sweep_eval(
    config: RunConfig,
    axis: str,
    values: Sequence[float | int | str] | None = None,
    *,
    pipeline: Pipeline | None = None,
    scenarios: Sequence[Scenario] | None = None,
    progress: bool = False,
) -> list[SweepRow]:
    """Evaluate one row per axis value.

    The s axis reuses one trained pipeline and only changes the inference plan.
    The lambda and blocks axes retrain from scratch for every value.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"Unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}.")
    parsed = [_sweep_value(axis, value) for value in (default_values(axis) if values is None else values)]
    if not parsed:
        raise ConfigurationError(f"The {axis} sweep has no values.")
    scenarios = eval_scenarios(config) if scenarios is None else scenarios
    if not scenarios:
        raise EmptyInputError("The evaluation scenario set is empty.")

    rows: list[SweepRow] = []
    if axis == "s":
        if pipeline is None:
            pipeline = train_run(config, progress=progress).state.pipeline
        for steps in parsed:
            inference = dataclasses.replace(config.inference, steps=steps)
            report = evaluate_model(pipeline, scenarios, config.metrics, inference, config.seed, config.threads)
            logger.info("sweep s=%d pr=%.3f sr_auc=%.3f ssim=%s", steps, report.pr, report.sr_auc, report.ssim_mean)
            rows.append(SweepRow(axis, steps, report))
        return rows

    for value in parsed:
        if axis == "lambda":
            variant = dataclasses.replace(config, trainer=dataclasses.replace(config.trainer, lambda_gen=value))
        else:
            variant = dataclasses.replace(config, denoiser=dataclasses.replace(config.denoiser, n=value))
        trained = train_run(variant, progress=progress).state.pipeline
        report = evaluate_run(variant, trained, scenarios)
        logger.info("sweep %s=%s pr=%.3f sr_auc=%.3f", axis, value, report.pr, report.sr_auc)
        rows.append(SweepRow(axis, value, report))
    return rows


def ablation(
    config: RunConfig,
    *,
    scenarios: Sequence[Scenario] | None = None,
    progress: bool = False,
) -> list[SweepRow]:
    """Baseline fusion, the raw generator, the CGAN fuser and the diffusion fuser on one scenario set."""
    scenarios = eval_scenarios(config) if scenarios is None else scenarios
    if not scenarios:
        raise EmptyInputError("The evaluation scenario set is empty.")
    rows = []
    for mode in tqdm(ABLATION_MODES, desc="ablate", disable=not progress):
        variant = dataclasses.replace(config, trainer=dataclasses.replace(config.trainer, mode=mode))
        pipeline = train_run(variant, progress=False).state.pipeline
        report = evaluate_run(variant, pipeline, scenarios)
        logger.info("ablation %s pr=%.3f sr_auc=%.3f", mode.value, report.pr, report.sr_auc)
        rows.append(SweepRow("method", mode.value, report))
    return rows


def _rate(value: float) -> str:
    return f"{100.0 * value:.1f}"


def _axis_value(value: float | int | str) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def report_to_csv(rows: Sequence[SweepRow]) -> str:
    """One row per axis value; the axis itself is carried by the file name."""
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        report = row.report
        writer.writerow(
            [
                _axis_value(row.value),
                _rate(report.pr),
                _rate(report.npr),
                _rate(report.sr_auc),
                _rate(report.sr_ratio),
                _rate(report.re),
                _rate(report.f_score),
                "" if report.ssim_mean is None else f"{report.ssim_mean:.4f}",
            ]
        )
    return output.getvalue()


def curves_to_csv(report: EvalReport) -> str:
    """Long-format precision, normalized precision and success curves."""
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for name, thresholds, curve in (
        ("precision", PRECISION_THRESHOLDS, report.precision_curve),
        ("norm_precision", NORM_PRECISION_THRESHOLDS, report.norm_precision_curve),
        ("success", SUCCESS_THRESHOLDS, report.success_curve),
    ):
        for threshold, value in zip(thresholds, curve):
            writer.writerow([name, f"{threshold:g}", f"{value:.6f}"])
    return output.getvalue()


def step_ssim_correlation(rows: Sequence[SweepRow]) -> float:
    """Spearman rank correlation between the step count and mean SSIM of an s sweep."""
    pairs = [(float(row.value), row.report.ssim_mean) for row in rows if row.report.ssim_mean is not None]
    if len(pairs) < 2:
        raise EmptyInputError("Need at least two s-sweep rows with SSIM to correlate.")
    steps, scores = zip(*pairs)
    result = spearmanr(steps, scores)
    correlation = float(result.statistic if hasattr(result, "statistic") else result.correlation)
    return correlation if not math.isnan(correlation) else 0.0
