from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from tqdm import tqdm

from .errors import ConfigurationError, NonFiniteError, TrainingAborted
from .fusion import (
    HeadParams,
    Mode,
    Pipeline,
    Scenario,
    ScenarioConfig,
    TypicalParams,
    head_forward,
    parse_mode,
    scenario_stream,
    stack_scenarios,
    track_loss,
    typical_fuse,
)
from .networks import DenoiserParams, DiscriminatorParams, denoiser_forward, discriminator_forward
from .schedule import NoiseSchedule, forward_diffuse
from .seeding import make_rng
from .tensor import Param, Tensor, add, clip, mse, mul, no_grad, scale, sgd_step, sub, zero_grad

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ["step", "epoch", "lr", "loss_track", "loss_gen", "total", "loss_D0", "loss_D1"]

# Sub-stream keys under the run seed.
STREAM_KEY = 1
NOISE_KEY = 2


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.DM
    lambda_gen: float = 1.0
    epochs: int = 100
    steps_per_epoch: int = 50
    batch_size: int = 4
    lr_start: float = 0.001
    lr_peak: float = 0.005
    warmup_epochs: int = 20
    lr_end: float = 0.00005
    momentum: float = 0.9
    weight_decay: float = 0.0001
    sample_clip: float = 4.0

    def validate(self) -> None:
        parse_mode(self.mode)
        if self.lambda_gen < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lambda_gen}.")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}.")
        if self.steps_per_epoch < 1:
            raise ConfigurationError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}.")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}.")
        if parse_mode(self.mode) is Mode.CGAN and self.batch_size < 2:
            raise ConfigurationError("CGAN training needs batch_size >= 2 for discriminator batch statistics.")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}.")
        if min(self.lr_start, self.lr_peak, self.lr_end) <= 0:
            raise ConfigurationError("Learning rates must be positive.")
        if self.momentum < 0 or self.weight_decay < 0 or self.sample_clip < 0:
            raise ConfigurationError("momentum, weight_decay and sample_clip must be non-negative.")


@dataclass
class LossBreakdown:
    loss_track: float
    loss_gen: float
    total: float
    components: dict[str, float] = field(default_factory=dict)


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    losses: LossBreakdown


@dataclass
class TrainState:
    pipeline: Pipeline
    epoch: int
    step: int


@dataclass
class TrainResult:
    state: TrainState
    records: list[LossRecord]


@dataclass(frozen=True)
class Batch:
    f_rgb: np.ndarray
    f_tir: np.ndarray
    fused: np.ndarray
    bboxes: np.ndarray

    @classmethod
    def from_scenarios(cls, scenarios: Sequence[Scenario]) -> Batch:
        return cls(*stack_scenarios(scenarios))

    @property
    def size(self) -> int:
        return int(self.f_rgb.shape[0])


def combined_loss(loss_track: float, loss_gen: float, lambda_gen: float) -> float:
    return loss_track + lambda_gen * loss_gen


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup lr_start -> lr_peak, then log-linear decay to lr_end at the last epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ConfigurationError(f"Epoch {epoch} outside [1, {cfg.epochs}].")
    warmup = cfg.warmup_epochs
    if epoch <= warmup:
        if warmup == 1:
            return cfg.lr_peak
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (epoch - 1) / (warmup - 1)
    remaining = cfg.epochs - warmup
    return cfg.lr_peak * (cfg.lr_end / cfg.lr_peak) ** ((epoch - warmup) / remaining)


def _ensure_finite(**losses: float) -> None:
    bad = [name for name, value in losses.items() if not math.isfinite(value)]
    if bad:
        raise NonFiniteError(f"Non-finite loss: {', '.join(f'{name}={losses[name]}' for name in bad)}.")


def _finish(loss_track: Tensor, loss_gen: Tensor, cfg: TrainConfig) -> tuple[Tensor, LossBreakdown]:
    track_value, gen_value = float(loss_track.data), float(loss_gen.data)
    _ensure_finite(loss_track=track_value, loss_gen=gen_value)
    total = add(loss_track, scale(loss_gen, cfg.lambda_gen))
    return total, LossBreakdown(track_value, gen_value, combined_loss(track_value, gen_value, cfg.lambda_gen))


def step_base(typical: TypicalParams, head: HeadParams, batch: Batch, cfg: TrainConfig, lr: float) -> LossBreakdown:
    """Stage-one baseline: typical fusion block plus head."""
    fused = typical_fuse(typical, batch.f_rgb, batch.f_tir)
    total, losses = _finish(track_loss(head_forward(head, fused), batch.bboxes), mse(fused, batch.fused), cfg)
    total.backward()
    sgd_step([*typical.parameters(), *head.parameters()], lr, cfg.momentum, cfg.weight_decay)
    return losses


def step_raw(
    denoiser: DenoiserParams,
    head: HeadParams,
    batch: Batch,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
) -> LossBreakdown:
    """Direct L2 regression of the generator output (from noise, t = T) onto fused."""
    z = rng.standard_normal(batch.fused.shape)
    output = denoiser_forward(denoiser, z, batch.f_rgb, batch.f_tir, sched.num_timesteps)
    total, losses = _finish(track_loss(head_forward(head, output), batch.bboxes), mse(output, batch.fused), cfg)
    total.backward()
    sgd_step([*denoiser.parameters(), *head.parameters()], lr, cfg.momentum, cfg.weight_decay)
    return losses


def one_step_sample(
    x_t: np.ndarray,
    eps_pred: Tensor,
    steps: np.ndarray,
    sched: NoiseSchedule,
    sample_clip: float,
) -> Tensor:
    """Differentiable DDIM jump from x_t at each sample's own t straight to t = 0."""
    alpha_bar = sched.alpha_bar[np.asarray(steps, dtype=np.int64)].reshape(-1, 1, 1, 1)
    x0 = sub(x_t / np.sqrt(alpha_bar), mul(eps_pred, np.sqrt((1.0 - alpha_bar) / alpha_bar)))
    return clip(x0, -sample_clip, sample_clip) if sample_clip > 0 else x0


def step_dm(
    denoiser: DenoiserParams,
    head: HeadParams,
    batch: Batch,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
    *,
    t: int | np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> LossBreakdown:
    """Noise-prediction loss on a forward-diffused batch plus the tracking branch on its one-step x0 estimate."""
    steps = rng.integers(1, sched.num_timesteps + 1, size=batch.size) if t is None else np.broadcast_to(t, (batch.size,))
    if noise is None:
        noise = rng.standard_normal(batch.fused.shape)
    x_t = forward_diffuse(batch.fused, steps, noise, sched)
    eps_pred = denoiser_forward(denoiser, x_t, batch.f_rgb, batch.f_tir, steps)
    loss_gen = mse(eps_pred, noise)

    sample = one_step_sample(x_t, eps_pred, steps, sched, cfg.sample_clip)
    total, losses = _finish(track_loss(head_forward(head, sample), batch.bboxes), loss_gen, cfg)
    total.backward()
    sgd_step([*denoiser.parameters(), *head.parameters()], lr, cfg.momentum, cfg.weight_decay)
    return losses


def discriminator_losses(
    discriminator: DiscriminatorParams,
    fake: np.ndarray | Tensor,
    batch: Batch,
    *,
    update_running: bool,
) -> tuple[Tensor, Tensor]:
    """(Loss_D0, Loss_D1): generated maps scored against 0, real fused maps against 1."""
    ones = np.ones((batch.size, 1))
    d_fake = discriminator_forward(discriminator, fake, batch.f_rgb, batch.f_tir, training=True, update_running=update_running)
    d_real = discriminator_forward(
        discriminator, batch.fused, batch.f_rgb, batch.f_tir, training=True, update_running=update_running
    )
    return mse(d_fake, np.zeros_like(ones)), mse(d_real, ones)


def _snapshot_discriminator(discriminator: DiscriminatorParams) -> Callable[[], None]:
    """Copy everything a discriminator update mutates; the returned callable writes it back."""
    params = discriminator.parameters()
    saved = [(param.data.copy(), param.momentum_buffer.copy(), param.grad.copy()) for param in params]
    stats = [(norm, norm.running_mean.copy(), norm.running_var.copy()) for norm in discriminator.norms]

    def restore() -> None:
        for param, (data, buffer, grad) in zip(params, saved):
            param.data[...] = data
            param.momentum_buffer[...] = buffer
            param.grad[...] = grad
        for norm, running_mean, running_var in stats:
            norm.running_mean[...] = running_mean
            norm.running_var[...] = running_var

    return restore


def step_cgan(
    generator: DenoiserParams,
    discriminator: DiscriminatorParams,
    head: HeadParams,
    batch: Batch,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
) -> LossBreakdown:
    """One discriminator update followed by one generator update on the same batch.

    A non-finite loss or gradient in either phase rolls the discriminator back to
    its state before the step.
    """
    if batch.size < 2:
        raise ConfigurationError(f"CGAN step needs at least 2 samples, got {batch.size}.")
    z = rng.standard_normal(batch.fused.shape)
    restore_discriminator = _snapshot_discriminator(discriminator)

    try:
        with no_grad():
            fake = denoiser_forward(generator, z, batch.f_rgb, batch.f_tir, 0).data
        loss_d0, loss_d1 = discriminator_losses(discriminator, fake, batch, update_running=True)
        d0_value, d1_value = float(loss_d0.data), float(loss_d1.data)
        _ensure_finite(loss_D0=d0_value, loss_D1=d1_value)
        add(loss_d0, loss_d1).backward()
        sgd_step(discriminator.parameters(), lr, cfg.momentum, cfg.weight_decay)

        fused_star = denoiser_forward(generator, z, batch.f_rgb, batch.f_tir, 0)
        d_out = discriminator_forward(discriminator, fused_star, batch.f_rgb, batch.f_tir, training=True, update_running=False)
        loss_g = mse(d_out, np.ones((batch.size, 1)))
        total, losses = _finish(track_loss(head_forward(head, fused_star), batch.bboxes), loss_g, cfg)
        total.backward()
        # Discriminator is frozen in this phase; drop whatever reached it.
        zero_grad(discriminator.parameters())
        sgd_step([*generator.parameters(), *head.parameters()], lr, cfg.momentum, cfg.weight_decay)
    except NonFiniteError:
        restore_discriminator()
        raise
    losses.components = {"loss_D0": d0_value, "loss_D1": d1_value}
    return losses


def trainable_parameters(pipeline: Pipeline) -> list[Param]:
    """Parameters the run's mode updates; the typical block is frozen outside the baseline."""
    params = [*pipeline.head.parameters()]
    if pipeline.mode is Mode.BASE:
        params.extend(pipeline.typical.parameters())
    elif pipeline.denoiser is not None:
        params.extend(pipeline.denoiser.parameters())
    if pipeline.discriminator is not None:
        params.extend(pipeline.discriminator.parameters())
    return params


def run_step(
    pipeline: Pipeline,
    batch: Batch,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
) -> LossBreakdown:
    mode = pipeline.mode
    if mode is Mode.BASE:
        return step_base(pipeline.typical, pipeline.head, batch, cfg, lr)
    if pipeline.denoiser is None:
        raise ConfigurationError(f"{mode.value} training needs a generative fuser.")
    if mode is Mode.RAW:
        return step_raw(pipeline.denoiser, pipeline.head, batch, pipeline.schedule, cfg, lr, rng)
    if mode is Mode.DM:
        return step_dm(pipeline.denoiser, pipeline.head, batch, pipeline.schedule, cfg, lr, rng)
    if pipeline.discriminator is None:
        raise ConfigurationError("CGAN training needs a discriminator.")
    return step_cgan(pipeline.denoiser, pipeline.discriminator, pipeline.head, batch, cfg, lr, rng)


def _batches(stream: Iterator[Scenario], size: int) -> Iterator[Batch]:
    while True:
        yield Batch.from_scenarios([next(stream) for _ in range(size)])


def train(
    pipeline: Pipeline,
    cfg: TrainConfig,
    scenario_config: ScenarioConfig,
    seed: int,
    *,
    save_state: Callable[[TrainState], Path] | None = None,
    progress: bool = False,
) -> TrainResult:
    """Run ``epochs x steps_per_epoch`` steps on a seeded scenario stream.

    ``save_state`` persists the final state, or the last good state before a
    non-finite loss or gradient aborts the run.
    """
    cfg.validate()
    if parse_mode(cfg.mode) is not pipeline.mode:
        raise ConfigurationError(f"Train config mode {cfg.mode} does not match pipeline mode {pipeline.mode.value}.")
    shape = pipeline.config.feature_shape
    batches = _batches(scenario_stream(make_rng(seed, STREAM_KEY), shape, scenario_config), cfg.batch_size)
    rng = make_rng(seed, NOISE_KEY)
    state = TrainState(pipeline=pipeline, epoch=0, step=0)
    records: list[LossRecord] = []

    logger.info(
        "Training %s for %d epochs x %d steps (batch %d, lambda %s)",
        pipeline.mode.value,
        cfg.epochs,
        cfg.steps_per_epoch,
        cfg.batch_size,
        cfg.lambda_gen,
    )
    with tqdm(total=cfg.epochs * cfg.steps_per_epoch, desc=f"train {pipeline.mode.value}", disable=not progress) as bar:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(epoch, cfg)
            epoch_records: list[LossRecord] = []
            for _ in range(cfg.steps_per_epoch):
                try:
                    losses = run_step(pipeline, next(batches), cfg, lr, rng)
                except NonFiniteError as exc:
                    logger.error("Aborting %s training at epoch %d step %d: %s", pipeline.mode.value, epoch, state.step + 1, exc)
                    path = save_state(state) if save_state is not None else None
                    raise TrainingAborted(
                        f"Training aborted at step {state.step + 1}: {exc}", checkpoint_path=path
                    ) from exc
                state.step += 1
                record = LossRecord(step=state.step, epoch=epoch, lr=lr, losses=losses)
                epoch_records.append(record)
                logger.debug("step %d loss_gen=%.6g total=%.6g", state.step, losses.loss_gen, losses.total)
                bar.update(1)
            state.epoch = epoch
            records.extend(epoch_records)
            logger.info(
                "epoch %d lr=%.6g loss_gen=%.6g total=%.6g",
                epoch,
                lr,
                float(np.mean([record.losses.loss_gen for record in epoch_records])),
                float(np.mean([record.losses.total for record in epoch_records])),
            )

    if save_state is not None:
        save_state(state)
    return TrainResult(state=state, records=records)


def _format(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def loss_log_to_csv(records: Sequence[LossRecord]) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(LOSS_LOG_COLUMNS)
    for record in records:
        components = record.losses.components
        writer.writerow(
            [
                record.step,
                record.epoch,
                _format(record.lr),
                _format(record.losses.loss_track),
                _format(record.losses.loss_gen),
                _format(record.losses.total),
                _format(components.get("loss_D0")),
                _format(components.get("loss_D1")),
            ]
        )
    return output.getvalue()
