from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigurationError
from .fusion import InferenceConfig, Mode, ScenarioConfig, parse_challenge, parse_mode
from .metrics import MetricConfig
from .networks import DenoiserConfig
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_NUM_TIMESTEPS, NoiseSchedule, build_schedule
from .tensor import PRECISIONS
from .trainers import TrainConfig

logger = logging.getLogger(__name__)

ENV_THREADS = "GMMT_THREADS"
ENV_PRECISION = "GMMT_PRECISION"
ENV_LOG_LEVEL = "GMMT_LOG_LEVEL"

# INI keys that differ from the dataclass field names.
KEY_ALIASES: dict[tuple[str, str], str] = {
    ("trainer", "lambda"): "lambda_gen",
}
OPTIONAL_FLOAT_KEYS = {("metrics", "pr_threshold"), ("metrics", "absent_threshold")}


@dataclass(frozen=True)
class ScheduleConfig:
    num_timesteps: int = DEFAULT_NUM_TIMESTEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def build(self) -> NoiseSchedule:
        return build_schedule(self.num_timesteps, self.beta_start, self.beta_end)


def _default_denoiser() -> DenoiserConfig:
    return DenoiserConfig(feature_channels=16, height=16, width=16)


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=_default_denoiser)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0
    out_dir: str = "runs"
    precision: str = "float64"
    threads: int = 1

    def validate(self) -> None:
        self.schedule.build()
        self.denoiser.validate()
        if self.denoiser.num_timesteps != self.schedule.num_timesteps:
            raise ConfigurationError(
                f"Denoiser T={self.denoiser.num_timesteps} differs from schedule T={self.schedule.num_timesteps}."
            )
        self.trainer.validate()
        self.scenario.validate(self.denoiser.height, self.denoiser.width)
        self.metrics.validate()
        self.inference.validate(self.schedule.num_timesteps)
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"Unknown precision {self.precision!r}; expected one of {', '.join(PRECISIONS)}.")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}.")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}.")


SECTIONS = ("schedule", "denoiser", "trainer", "scenario", "metrics", "inference")
RUN_KEYS = ("seed", "out_dir", "precision", "threads")
# Derived from [schedule] num_timesteps rather than written twice.
DERIVED_FIELDS = {("denoiser", "num_timesteps")}


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(item) for item in value)
    return str(value)


def _parse_value(section: str, key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if (section, key) in OPTIONAL_FLOAT_KEYS:
            return None if text == "" else float(text)
        if isinstance(default, Mode):
            return parse_mode(text)
        if isinstance(default, bool):
            if text.lower() not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(text)
            return text.lower() in {"true", "1", "yes"}
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(parse_challenge(item) for item in text.split(",") if item.strip())
        return text
    except ValueError as exc:
        raise ConfigurationError(f"Invalid value for [{section}] {key}: {raw!r}.") from exc


def _ini_key(section: str, field_name: str) -> str:
    for (alias_section, alias), target in KEY_ALIASES.items():
        if alias_section == section and target == field_name:
            return alias
    return field_name


def config_to_ini(config: RunConfig) -> str:
    lines = ["[run]", *(f"{key} = {_format_value(getattr(config, key))}" for key in RUN_KEYS), ""]
    for section in SECTIONS:
        block = getattr(config, section)
        lines.append(f"[{section}]")
        lines.extend(
            f"{_ini_key(section, item.name)} = {_format_value(getattr(block, item.name))}"
            for item in dataclasses.fields(block)
            if (section, item.name) not in DERIVED_FIELDS
        )
        lines.append("")
    return "\n".join(lines)


def _apply_section(block: Any, section: str, values: Mapping[str, str]) -> Any:
    known = {item.name: item for item in dataclasses.fields(block) if (section, item.name) not in DERIVED_FIELDS}
    updates: dict[str, Any] = {}
    for key, raw in values.items():
        name = KEY_ALIASES.get((section, key), key)
        if name not in known:
            raise ConfigurationError(f"Unknown key {key!r} in section [{section}].")
        updates[name] = _parse_value(section, key, raw, getattr(block, name))
    return dataclasses.replace(block, **updates)


def config_from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"Malformed config file: {exc}") from exc

    config = base or RunConfig()
    updates: dict[str, Any] = {}
    for section in parser.sections():
        values = dict(parser[section])
        if section == "run":
            for key, raw in values.items():
                if key not in RUN_KEYS:
                    raise ConfigurationError(f"Unknown key {key!r} in section [run].")
                updates[key] = _parse_value("run", key, raw, getattr(config, key))
        elif section in SECTIONS:
            updates[section] = _apply_section(getattr(config, section), section, values)
        else:
            raise ConfigurationError(f"Unknown config section [{section}].")
    return synchronize(dataclasses.replace(config, **updates))


def synchronize(config: RunConfig) -> RunConfig:
    """Carry the schedule's T into the denoiser config."""
    if config.denoiser.num_timesteps == config.schedule.num_timesteps:
        return config
    return dataclasses.replace(
        config, denoiser=dataclasses.replace(config.denoiser, num_timesteps=config.schedule.num_timesteps)
    )


def apply_env(config: RunConfig, env: Mapping[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    updates: dict[str, Any] = {}
    threads = (env.get(ENV_THREADS) or "").strip()
    if threads:
        try:
            updates["threads"] = int(threads)
        except ValueError as exc:
            raise ConfigurationError(f"{ENV_THREADS} must be an integer, got {threads!r}.") from exc
    precision = (env.get(ENV_PRECISION) or "").strip().lower()
    if precision:
        updates["precision"] = precision
    return dataclasses.replace(config, **updates) if updates else config


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then the config file, then environment overrides."""
    config = RunConfig()
    if path is not None:
        config_path = Path(path)
        try:
            text = config_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"Cannot read config file {config_path}: {exc}") from exc
        config = config_from_ini(text, config)
        logger.debug("Loaded config from %s", config_path)
    return apply_env(config, env)


def apply_overrides(
    config: RunConfig,
    *,
    seed: int | None = None,
    mode: str | None = None,
    steps: int | None = None,
    lambda_gen: float | None = None,
    blocks: int | None = None,
    epochs: int | None = None,
    steps_per_epoch: int | None = None,
    out_dir: str | None = None,
) -> RunConfig:
    """Command-line flags win over every other source."""
    trainer_updates: dict[str, Any] = {}
    if mode is not None:
        trainer_updates["mode"] = parse_mode(mode)
    if lambda_gen is not None:
        trainer_updates["lambda_gen"] = float(lambda_gen)
    if epochs is not None:
        trainer_updates["epochs"] = int(epochs)
        trainer_updates["warmup_epochs"] = min(config.trainer.warmup_epochs, int(epochs))
    if steps_per_epoch is not None:
        trainer_updates["steps_per_epoch"] = int(steps_per_epoch)

    updates: dict[str, Any] = {}
    if trainer_updates:
        updates["trainer"] = dataclasses.replace(config.trainer, **trainer_updates)
    if steps is not None:
        updates["inference"] = dataclasses.replace(config.inference, steps=int(steps))
    if blocks is not None:
        updates["denoiser"] = dataclasses.replace(config.denoiser, n=int(blocks))
    if seed is not None:
        updates["seed"] = int(seed)
    if out_dir is not None:
        updates["out_dir"] = str(out_dir)
    return dataclasses.replace(config, **updates) if updates else config
