from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_NUM_TIMESTEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule.

    ``beta[t - 1]`` and ``alpha[t - 1]`` belong to step ``t`` (1-based) while
    ``alpha_bar`` is indexed directly by ``t`` with ``alpha_bar[0] == 1``.
    """

    num_timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha[t - 1])

    def check_timestep(self, t: int | np.ndarray, *, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        values = np.asarray(t)
        if values.size and (values.min() < low or values.max() > self.num_timesteps):
            raise ConfigurationError(f"Timestep {t} outside [{low}, {self.num_timesteps}].")


@dataclass(frozen=True)
class StepPlan:
    steps: int
    timesteps: tuple[int, ...]


def build_schedule(num_timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if num_timesteps < 1:
        raise ConfigurationError(f"num_timesteps must be >= 1, got {num_timesteps}.")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"Beta range must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})."
        )
    beta = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(num_timesteps=num_timesteps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def default_schedule() -> NoiseSchedule:
    return build_schedule(DEFAULT_NUM_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)


def make_plan(num_timesteps: int, steps: int) -> StepPlan:
    """``steps`` evenly spaced timesteps from T down to 1, rounded half up."""
    if not 1 <= steps <= num_timesteps:
        raise ConfigurationError(f"Step count must lie in [1, {num_timesteps}], got {steps}.")
    spaced = np.floor(np.linspace(num_timesteps, 1, steps) + 0.5).astype(np.int64)
    return StepPlan(steps=steps, timesteps=tuple(int(t) for t in spaced))


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    # Broadcast one coefficient per leading (batch) index over the trailing axes.
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def forward_diffuse(x0: np.ndarray, t: int | np.ndarray, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.

    ``t`` may be a single step or one step per leading index of ``x0``.
    """
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise ShapeError(f"Noise shape {noise.shape} does not match x0 shape {x0.shape}.")
    steps = np.asarray(t, dtype=np.int64)
    sched.check_timestep(steps)
    alpha_bar = _per_sample(sched.alpha_bar[steps], x0.ndim)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


def predict_x0(x_t: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    sched.check_timestep(t)
    alpha_bar = sched.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - alpha_bar) * eps_pred) / np.sqrt(alpha_bar)


def posterior_params(x_t: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x0) with x0 estimated from ``eps_pred``."""
    sched.check_timestep(t)
    alpha_bar_t = sched.alpha_bar[t]
    alpha_bar_prev = sched.alpha_bar[t - 1]
    beta_t = sched.beta[t - 1]
    alpha_t = sched.alpha[t - 1]
    sigma = float((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * beta_t)
    x0_hat = predict_x0(x_t, eps_pred, t, sched)
    mu = (
        np.sqrt(alpha_t) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * x_t
        + np.sqrt(alpha_bar_prev) * beta_t / (1.0 - alpha_bar_t) * x0_hat
    )
    return mu, sigma


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    alpha_bar_t = sched.alpha_bar[t]
    alpha_bar_prev = sched.alpha_bar[t_prev]
    variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * (1.0 - alpha_bar_t / alpha_bar_prev)
    return float(eta * np.sqrt(max(variance, 0.0)))


def ddim_step(
    x_t: np.ndarray,
    eps_pred: np.ndarray,
    t: int,
    t_prev: int,
    eta: float,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    *,
    clip_sample: float = 0.0,
) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev`` may be 0).

    ``clip_sample > 0`` clamps the predicted x0 to ``[-clip_sample, clip_sample]``.
    """
    if t_prev >= t:
        raise ConfigurationError(f"DDIM step needs t_prev < t, got t={t}, t_prev={t_prev}.")
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta must lie in [0, 1], got {eta}.")
    sched.check_timestep(t)
    sched.check_timestep(t_prev, allow_zero=True)
    x0_hat = predict_x0(x_t, eps_pred, t, sched)
    if clip_sample > 0:
        x0_hat = np.clip(x0_hat, -clip_sample, clip_sample)
    alpha_bar_prev = sched.alpha_bar[t_prev]
    sigma = ddim_sigma(t, t_prev, eta, sched)
    direction = np.sqrt(max(1.0 - alpha_bar_prev - sigma**2, 0.0)) * eps_pred
    x_prev = np.sqrt(alpha_bar_prev) * x0_hat + direction
    if sigma > 0:
        if rng is None:
            raise ConfigurationError("Stochastic DDIM (eta > 0) needs an rng.")
        x_prev = x_prev + sigma * rng.standard_normal(np.shape(x_t))
    return x_prev
