from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteError, ShapeError
from .networks import (
    ConvLayer,
    DenoiserConfig,
    DenoiserParams,
    DiscriminatorParams,
    build_denoiser,
    build_discriminator,
    denoiser_forward,
    make_conv,
)
from .schedule import NoiseSchedule, StepPlan, ddim_step, make_plan
from .tensor import Param, Tensor, add, channel_concat, channel_slice, gather_at, mse, no_grad, relu

logger = logging.getLogger(__name__)

ORACLE_EPS = 1e-6
RESPONSE_SIGMA = 1.0


class Challenge(str, Enum):
    CLEAN = "clean"
    RGB_DEGRADED = "rgb_degraded"
    TIR_DEGRADED = "tir_degraded"
    BOTH_NOISY = "both_noisy"


CHALLENGE_CODES: dict[Challenge, int] = {challenge: index for index, challenge in enumerate(Challenge)}


class Mode(str, Enum):
    BASE = "base"
    RAW = "raw"
    CGAN = "cgan"
    DM = "dm"


def parse_mode(value: str | Mode) -> Mode:
    try:
        return value if isinstance(value, Mode) else Mode(str(value).strip().lower())
    except ValueError as exc:
        choices = ", ".join(mode.value for mode in Mode)
        raise ConfigurationError(f"Unknown mode {value!r}; expected one of {choices}.") from exc


def parse_challenge(value: str | Challenge) -> Challenge:
    try:
        return value if isinstance(value, Challenge) else Challenge(str(value).strip().lower())
    except ValueError as exc:
        choices = ", ".join(challenge.value for challenge in Challenge)
        raise ConfigurationError(f"Unknown challenge {value!r}; expected one of {choices}.") from exc


@dataclass(frozen=True)
class ScenarioConfig:
    target_amp_low: float = 0.5
    target_amp_high: float = 1.5
    min_box: float = 2.0
    max_box: float = 5.0
    distractors: int = 1
    distractor_amp: float = 0.6
    background_std: float = 0.05
    degrade_factor: float = 0.05
    noise_std: float = 0.3
    challenges: tuple[Challenge, ...] = tuple(Challenge)
    eval_count: int = 200

    def validate(self, height: int, width: int) -> None:
        if not 0 < self.target_amp_low <= self.target_amp_high:
            raise ConfigurationError("Scenario target amplitudes must satisfy 0 < low <= high.")
        if not 1.0 <= self.min_box <= self.max_box:
            raise ConfigurationError(f"Scenario box sizes must satisfy 1 <= min_box <= max_box, got {self.min_box}, {self.max_box}.")
        if self.max_box > min(height, width):
            raise ConfigurationError(f"max_box {self.max_box} exceeds the {height}x{width} feature grid.")
        if not 0.0 <= self.degrade_factor < 1.0:
            raise ConfigurationError(f"degrade_factor must lie in [0, 1), got {self.degrade_factor}.")
        if self.distractors < 0 or self.background_std < 0 or self.noise_std < 0:
            raise ConfigurationError("Scenario distractor count and noise levels must be non-negative.")
        if not self.challenges:
            raise ConfigurationError("Scenario challenge list is empty.")
        if self.eval_count < 0:
            raise ConfigurationError(f"eval_count must be >= 0, got {self.eval_count}.")


@dataclass(frozen=True)
class InferenceConfig:
    steps: int = 1
    eta: float = 0.0
    generator_passes: int = 1
    sample_clip: float = 0.0

    def validate(self, num_timesteps: int) -> None:
        if not 1 <= self.steps <= num_timesteps:
            raise ConfigurationError(f"Inference steps must lie in [1, {num_timesteps}], got {self.steps}.")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}.")
        if self.generator_passes < 1:
            raise ConfigurationError(f"generator_passes must be >= 1, got {self.generator_passes}.")
        if self.sample_clip < 0:
            raise ConfigurationError(f"sample_clip must be >= 0, got {self.sample_clip}.")


@dataclass
class Scenario:
    f_rgb: np.ndarray
    f_tir: np.ndarray
    fused_oracle: np.ndarray
    bbox: tuple[float, float, float, float]
    challenge: Challenge
    target_layers: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)


@dataclass
class Prediction:
    bbox: tuple[float, float, float, float]
    response_map: np.ndarray
    peak: float


@dataclass
class TypicalParams:
    conv: ConvLayer

    def parameters(self) -> list[Param]:
        return self.conv.parameters()


@dataclass
class HeadParams:
    hidden: ConvLayer
    out: ConvLayer

    def parameters(self) -> list[Param]:
        return [*self.hidden.parameters(), *self.out.parameters()]


@dataclass
class Pipeline:
    """Everything a trained run owns: head, baseline fusion block and the generative fuser."""

    mode: Mode
    config: DenoiserConfig
    schedule: NoiseSchedule
    head: HeadParams
    typical: TypicalParams
    denoiser: DenoiserParams | None = None
    discriminator: DiscriminatorParams | None = None


# --- synthetic world -------------------------------------------------------


def _gaussian_bump(height: int, width: int, cx: float, cy: float, sigma_x: float, sigma_y: float) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    return np.exp(-((cols - cx) ** 2) / (2.0 * sigma_x**2) - ((rows - cy) ** 2) / (2.0 * sigma_y**2))


def _distractor_layer(rng: np.random.Generator, shape: tuple[int, int, int], config: ScenarioConfig) -> np.ndarray:
    channels, height, width = shape
    layer = np.zeros(shape)
    for _ in range(config.distractors):
        cx = rng.uniform(0, width - 1)
        cy = rng.uniform(0, height - 1)
        amplitudes = config.distractor_amp * rng.uniform(0.5, 1.0, size=channels)
        layer += amplitudes[:, None, None] * _gaussian_bump(height, width, cx, cy, 1.0, 1.0)
    return layer


def synth_scenario(
    rng: np.random.Generator,
    challenge: Challenge | str,
    shape: tuple[int, int, int],
    config: ScenarioConfig | None = None,
) -> Scenario:
    """Plant one target in both modalities and apply the challenge."""
    config = config or ScenarioConfig()
    challenge = parse_challenge(challenge)
    channels, height, width = shape
    config.validate(height, width)

    cx = float(rng.integers(0, width))
    cy = float(rng.integers(0, height))
    w = float(rng.uniform(config.min_box, config.max_box))
    h = float(rng.uniform(config.min_box, config.max_box))
    bump = _gaussian_bump(height, width, cx, cy, max(w / 3.0, 0.5), max(h / 3.0, 0.5))
    rgb_amp = rng.uniform(config.target_amp_low, config.target_amp_high, size=channels)
    tir_amp = rng.uniform(config.target_amp_low, config.target_amp_high, size=channels)
    target_rgb = rgb_amp[:, None, None] * bump
    target_tir = tir_amp[:, None, None] * bump
    if challenge is Challenge.RGB_DEGRADED:
        target_rgb = target_rgb * config.degrade_factor
    elif challenge is Challenge.TIR_DEGRADED:
        target_tir = target_tir * config.degrade_factor

    f_rgb = target_rgb + _distractor_layer(rng, shape, config) + config.background_std * rng.standard_normal(shape)
    f_tir = target_tir + _distractor_layer(rng, shape, config) + config.background_std * rng.standard_normal(shape)
    # Oracle is taken before sensor noise.
    fused_oracle = oracle_fuse(f_rgb, f_tir)
    if challenge is Challenge.BOTH_NOISY:
        f_rgb = f_rgb + config.noise_std * rng.standard_normal(shape)
        f_tir = f_tir + config.noise_std * rng.standard_normal(shape)

    return Scenario(
        f_rgb=f_rgb,
        f_tir=f_tir,
        fused_oracle=fused_oracle,
        bbox=(cx, cy, w, h),
        challenge=challenge,
        target_layers=(target_rgb, target_tir),
    )


def scenario_stream(
    rng: np.random.Generator,
    shape: tuple[int, int, int],
    config: ScenarioConfig | None = None,
) -> Iterator[Scenario]:
    config = config or ScenarioConfig()
    while True:
        challenge = config.challenges[int(rng.integers(0, len(config.challenges)))]
        yield synth_scenario(rng, challenge, shape, config)


def synth_scenarios(
    rng: np.random.Generator,
    count: int,
    shape: tuple[int, int, int],
    config: ScenarioConfig | None = None,
    *,
    challenge: Challenge | str | None = None,
) -> list[Scenario]:
    if challenge is not None:
        return [synth_scenario(rng, challenge, shape, config) for _ in range(count)]
    stream = scenario_stream(rng, shape, config)
    return [next(stream) for _ in range(count)]


def stack_scenarios(scenarios: Sequence[Scenario]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (f_rgb, f_tir, fused_oracle, bboxes) with a leading scenario axis."""
    if not scenarios:
        raise ShapeError("Cannot stack an empty scenario list.")
    return (
        np.stack([scenario.f_rgb for scenario in scenarios]),
        np.stack([scenario.f_tir for scenario in scenarios]),
        np.stack([scenario.fused_oracle for scenario in scenarios]),
        np.array([scenario.bbox for scenario in scenarios], dtype=np.float64),
    )


def _local_energy(x: np.ndarray) -> np.ndarray:
    # 3x3 box sum of squared values, summed over channels; zero padding at the border.
    energy = (x**2).sum(axis=-3)
    padded = np.pad(energy, [(0, 0)] * (energy.ndim - 2) + [(1, 1), (1, 1)])
    height, width = energy.shape[-2:]
    total = np.zeros_like(energy)
    for i in range(3):
        for j in range(3):
            total += padded[..., i : i + height, j : j + width]
    return total


def oracle_fuse(f_rgb: np.ndarray, f_tir: np.ndarray) -> np.ndarray:
    """Per-position reliability-gated convex mix of the two modalities."""
    f_rgb = np.asarray(f_rgb, dtype=np.float64)
    f_tir = np.asarray(f_tir, dtype=np.float64)
    if f_rgb.shape != f_tir.shape or f_rgb.ndim < 3:
        raise ShapeError(f"oracle_fuse needs matching [.., C, H, W] maps, got {f_rgb.shape} and {f_tir.shape}.")
    energy_rgb = _local_energy(f_rgb)
    energy_tir = _local_energy(f_tir)
    weight = (energy_rgb / (energy_rgb + energy_tir + ORACLE_EPS))[..., None, :, :]
    return f_tir + weight * (f_rgb - f_tir)


# --- learned blocks --------------------------------------------------------


def build_typical(config: DenoiserConfig, rng: np.random.Generator) -> TypicalParams:
    c = config.feature_channels
    return TypicalParams(conv=make_conv(rng, 2 * c, c, "typical.conv"))


def typical_fuse(params: TypicalParams, f_rgb: Tensor | np.ndarray, f_tir: Tensor | np.ndarray) -> Tensor:
    return params.conv(channel_concat(f_rgb, f_tir))


def build_head(config: DenoiserConfig, rng: np.random.Generator) -> HeadParams:
    return HeadParams(
        hidden=make_conv(rng, config.feature_channels, config.head_channels, "head.hidden"),
        out=make_conv(rng, config.head_channels, 3, "head.out"),
    )


def head_forward(params: HeadParams, fused: Tensor | np.ndarray) -> Tensor:
    """[N, C, H, W] -> [N, 3, H, W]: channel 0 response, channels 1-2 box size (w, h)."""
    return params.out(relu(params.hidden(fused)))


def render_response(bboxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """Unit Gaussian (sigma 1) at every box center, shape [N, 1, H, W]."""
    bboxes = np.atleast_2d(np.asarray(bboxes, dtype=np.float64))
    maps = [_gaussian_bump(height, width, cx, cy, RESPONSE_SIGMA, RESPONSE_SIGMA) for cx, cy, _, _ in bboxes]
    return np.stack(maps)[:, None]


def _center_cells(bboxes: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.clip(np.floor(bboxes[:, 1] + 0.5), 0, height - 1).astype(np.int64)
    cols = np.clip(np.floor(bboxes[:, 0] + 0.5), 0, width - 1).astype(np.int64)
    return rows, cols


def track_loss(head_out: Tensor, bboxes: np.ndarray) -> Tensor:
    """mse(response, Gaussian at truth) + mse(size at truth center, truth (w, h))."""
    bboxes = np.atleast_2d(np.asarray(bboxes, dtype=np.float64))
    if head_out.ndim != 4 or head_out.shape[1] != 3 or head_out.shape[0] != bboxes.shape[0]:
        raise ShapeError(f"Head output {head_out.shape} does not match {bboxes.shape[0]} boxes.")
    height, width = head_out.shape[2:]
    response = channel_slice(head_out, 0, 1)
    rows, cols = _center_cells(bboxes, height, width)
    size = gather_at(channel_slice(head_out, 1, 3), rows, cols)
    return add(mse(response, render_response(bboxes, height, width)), mse(size, bboxes[:, 2:4]))


def decode_prediction(head_out: np.ndarray) -> Prediction:
    """Box center at the response argmax (first in row-major order on ties), size read there."""
    response = np.asarray(head_out[0])
    height, width = response.shape
    flat = int(np.argmax(response))
    row, col = divmod(flat, width)
    w = max(float(head_out[1, row, col]), 1.0)
    h = max(float(head_out[2, row, col]), 1.0)
    return Prediction(bbox=(float(col), float(row), w, h), response_map=response[None].copy(), peak=float(response[row, col]))


def track_head(params: HeadParams, fused: Tensor | np.ndarray) -> list[Prediction]:
    with no_grad():
        out = head_forward(params, fused).data
    if out.ndim == 3:
        out = out[None]
    return [decode_prediction(sample) for sample in out]


# --- generative inference --------------------------------------------------


def _check_params_finite(params: DenoiserParams) -> None:
    for param in params.parameters():
        if not np.all(np.isfinite(param.data)):
            raise NonFiniteError(f"Parameter {param.name} holds non-finite values; the model cannot run inference.")


def gmmt_infer(
    params: DenoiserParams,
    f_rgb: np.ndarray,
    f_tir: np.ndarray,
    plan: StepPlan,
    mode: Mode | str,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    *,
    eta: float = 0.0,
    generator_passes: int = 1,
    sample_clip: float = 0.0,
) -> np.ndarray:
    """Generate fused* from noise conditioned on the two modalities.

    Diffusion mode walks the plan with one denoiser call per timestep, ending at t=0.
    Generator modes feed each output back in as the next noise input.
    """
    mode = parse_mode(mode)
    if mode is Mode.BASE:
        raise ConfigurationError("The baseline route does not run generative inference.")
    _check_params_finite(params)
    z = rng.standard_normal(np.shape(f_rgb))
    with no_grad():
        if mode is Mode.DM:
            timesteps = plan.timesteps
            for index, t in enumerate(timesteps):
                t_prev = timesteps[index + 1] if index + 1 < len(timesteps) else 0
                eps = denoiser_forward(params, z, f_rgb, f_tir, t).data
                z = ddim_step(z, eps, t, t_prev, eta, sched, rng, clip_sample=sample_clip)
        else:
            flag = sched.num_timesteps if mode is Mode.RAW else 0
            for _ in range(generator_passes):
                z = denoiser_forward(params, z, f_rgb, f_tir, flag).data
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("Generated fused features contain non-finite values.")
    return z


def fuse(
    pipeline: Pipeline,
    f_rgb: np.ndarray,
    f_tir: np.ndarray,
    inference: InferenceConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    if pipeline.mode is Mode.BASE:
        with no_grad():
            return typical_fuse(pipeline.typical, f_rgb, f_tir).data
    if pipeline.denoiser is None:
        raise ConfigurationError(f"Pipeline in {pipeline.mode.value} mode has no generative fuser.")
    inference.validate(pipeline.schedule.num_timesteps)
    return gmmt_infer(
        pipeline.denoiser,
        f_rgb,
        f_tir,
        make_plan(pipeline.schedule.num_timesteps, inference.steps),
        pipeline.mode,
        pipeline.schedule,
        rng,
        eta=inference.eta,
        generator_passes=inference.generator_passes,
        sample_clip=inference.sample_clip,
    )


def predict(
    pipeline: Pipeline,
    scenarios: Sequence[Scenario],
    inference: InferenceConfig,
    rng: np.random.Generator,
) -> list[Prediction]:
    """Fuse through the typical block (baseline) or the generative fuser, then track."""
    f_rgb, f_tir, _, _ = stack_scenarios(scenarios)
    fused = fuse(pipeline, f_rgb, f_tir, inference, rng)
    return track_head(pipeline.head, fused)


def build_pipeline(mode: Mode | str, config: DenoiserConfig, schedule: NoiseSchedule, rng: np.random.Generator) -> Pipeline:
    """Fresh head and typical block, plus the generative fuser (and discriminator for CGAN)."""
    mode = parse_mode(mode)
    config.validate()
    if config.num_timesteps != schedule.num_timesteps:
        raise ConfigurationError(
            f"Denoiser expects T={config.num_timesteps} but the schedule has T={schedule.num_timesteps}."
        )
    head = build_head(config, rng)
    typical = build_typical(config, rng)
    denoiser = None if mode is Mode.BASE else build_denoiser(config, rng)
    discriminator = build_discriminator(config, rng) if mode is Mode.CGAN else None
    return Pipeline(mode, config, schedule, head, typical, denoiser, discriminator)
