from __future__ import annotations

import hashlib
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_ini, config_to_ini
from .errors import ConfigurationError, CorruptFileError, MissingCheckpointError
from .fusion import CHALLENGE_CODES, Challenge, Pipeline, Scenario, build_pipeline, oracle_fuse
from .seeding import make_rng
from .tensor import Param
from .trainers import TrainState

logger = logging.getLogger(__name__)

SCENARIO_MAGIC = b"GMMT"
SCENARIO_VERSION = 1
CHECKPOINT_MAGIC = b"GMCK"
CHECKPOINT_VERSION = 1
CHECKSUM_SIZE = 8

_HEADER = struct.Struct("<4sIIII")
_BBOX = struct.Struct("<4d")
_CODES_TO_CHALLENGE = {code: challenge for challenge, code in CHALLENGE_CODES.items()}


def _f64(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


# --- feature records -------------------------------------------------------


def encode_record(
    f_rgb: np.ndarray,
    f_tir: np.ndarray,
    fused: np.ndarray,
    bbox: tuple[float, float, float, float],
    challenge: Challenge,
) -> bytes:
    """Little-endian record: header, f_rgb, f_tir, fused, bbox, challenge code."""
    if not (f_rgb.shape == f_tir.shape == fused.shape) or f_rgb.ndim != 3:
        raise ConfigurationError(f"Record maps must share one [C, H, W] shape, got {f_rgb.shape}, {f_tir.shape}, {fused.shape}.")
    channels, height, width = f_rgb.shape
    return b"".join(
        [
            _HEADER.pack(SCENARIO_MAGIC, SCENARIO_VERSION, channels, height, width),
            _f64(f_rgb),
            _f64(f_tir),
            _f64(fused),
            _BBOX.pack(*bbox),
            struct.pack("<B", CHALLENGE_CODES[challenge]),
        ]
    )


def encode_scenario(scenario: Scenario) -> bytes:
    return encode_record(scenario.f_rgb, scenario.f_tir, scenario.fused_oracle, scenario.bbox, scenario.challenge)


def decode_record(raw: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[float, float, float, float], Challenge]:
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"Feature record is truncated ({len(raw)} bytes).")
    magic, version, channels, height, width = _HEADER.unpack_from(raw, 0)
    if magic != SCENARIO_MAGIC:
        raise CorruptFileError(f"Bad feature record magic {magic!r}.")
    if version != SCENARIO_VERSION:
        raise CorruptFileError(f"Unsupported feature record version {version}.")
    count = channels * height * width
    expected = _HEADER.size + 3 * count * 8 + _BBOX.size + 1
    if len(raw) != expected:
        raise CorruptFileError(f"Feature record has {len(raw)} bytes, expected {expected}.")
    offset = _HEADER.size
    maps = []
    for _ in range(3):
        maps.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(channels, height, width))
        offset += count * 8
    bbox = _BBOX.unpack_from(raw, offset)
    code = raw[offset + _BBOX.size]
    if code not in _CODES_TO_CHALLENGE:
        raise CorruptFileError(f"Unknown challenge code {code}.")
    return maps[0], maps[1], maps[2], bbox, _CODES_TO_CHALLENGE[code]


def decode_scenario(raw: bytes) -> Scenario:
    f_rgb, f_tir, fused, bbox, challenge = decode_record(raw)
    return Scenario(f_rgb=f_rgb, f_tir=f_tir, fused_oracle=fused, bbox=bbox, challenge=challenge)


def _write_atomic(path: Path, payload: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(path.name + ".tmp")
    temporary.write_bytes(payload)
    os.replace(temporary, path)
    return path


def write_scenario(path: str | Path, scenario: Scenario) -> Path:
    return _write_atomic(Path(path), encode_scenario(scenario))


def read_scenario(path: str | Path) -> Scenario:
    scenario = decode_scenario(Path(path).read_bytes())
    noisy = scenario.challenge is Challenge.BOTH_NOISY
    if not noisy and not np.array_equal(scenario.fused_oracle, oracle_fuse(scenario.f_rgb, scenario.f_tir)):
        logger.warning("Scenario %s: stored fused map differs from the oracle fusion of its modalities", path)
    return scenario


# --- checkpoints -----------------------------------------------------------


def _named_arrays(pipeline: Pipeline) -> dict[str, np.ndarray]:
    """Every persisted array: parameter values, momentum buffers, running statistics."""
    params: list[Param] = [*pipeline.head.parameters(), *pipeline.typical.parameters()]
    if pipeline.denoiser is not None:
        params.extend(pipeline.denoiser.parameters())
    if pipeline.discriminator is not None:
        params.extend(pipeline.discriminator.parameters())
    arrays: dict[str, np.ndarray] = {}
    for param in params:
        arrays[param.name] = param.data
        arrays[f"{param.name}.momentum"] = param.momentum_buffer
    if pipeline.discriminator is not None:
        arrays.update(pipeline.discriminator.running_stats())
    return arrays


def encode_checkpoint(state: TrainState, config: RunConfig) -> bytes:
    config_text = config_to_ini(config).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_text)),
        config_text,
        struct.pack("<II", state.epoch, state.step),
    ]
    arrays = _named_arrays(state.pipeline)
    parts.append(struct.pack("<I", len(arrays)))
    for name, values in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(_f64(values))
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=CHECKSUM_SIZE).digest()


def save_checkpoint(path: str | Path, state: TrainState, config: RunConfig) -> Path:
    target = _write_atomic(Path(path), encode_checkpoint(state, config))
    logger.info("Saved checkpoint %s (epoch %d, step %d)", target, state.epoch, state.step)
    return target


class _Reader:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise CorruptFileError("Checkpoint is truncated.")
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        layout = struct.Struct(fmt)
        return layout.unpack(self.take(layout.size))


def _decode_checkpoint(raw: bytes) -> tuple[RunConfig, int, int, dict[str, np.ndarray]]:
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + CHECKSUM_SIZE:
        raise CorruptFileError("Checkpoint is truncated.")
    body, checksum = raw[:-CHECKSUM_SIZE], raw[-CHECKSUM_SIZE:]
    if hashlib.blake2b(body, digest_size=CHECKSUM_SIZE).digest() != checksum:
        raise CorruptFileError("Checkpoint checksum mismatch.")
    reader = _Reader(body)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptFileError("Not a checkpoint file (bad magic).")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CorruptFileError(f"Unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}.")
    (config_length,) = reader.unpack("<I")
    config = config_from_ini(reader.take(config_length).decode("utf-8"))
    epoch, step = reader.unpack("<II")
    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(size * 8), dtype="<f8").astype(np.float64).reshape(shape)
    if reader.offset != len(body):
        raise CorruptFileError("Checkpoint has trailing bytes.")
    return config, epoch, step, arrays


def load_checkpoint(path: str | Path, expected: RunConfig | None = None) -> tuple[TrainState, RunConfig]:
    """Rebuild the stored pipeline.

    ``expected`` must describe the same denoiser architecture as the stored run.
    Every section is validated before any array is assigned.
    """
    checkpoint = Path(path)
    try:
        raw = checkpoint.read_bytes()
    except FileNotFoundError as exc:
        raise MissingCheckpointError(f"Checkpoint not found: {checkpoint}") from exc
    config, epoch, step, arrays = _decode_checkpoint(raw)
    if expected is not None and expected.denoiser != config.denoiser:
        raise ConfigurationError(
            f"Checkpoint denoiser config {config.denoiser} does not match the requested {expected.denoiser}."
        )

    pipeline = build_pipeline(config.trainer.mode, config.denoiser, config.schedule.build(), make_rng(config.seed))
    targets = _named_arrays(pipeline)
    missing = sorted(set(targets) - set(arrays))
    unexpected = sorted(set(arrays) - set(targets))
    if missing or unexpected:
        raise CorruptFileError(f"Checkpoint sections do not match the model: missing {missing}, unexpected {unexpected}.")
    for name, target in targets.items():
        if target.shape != arrays[name].shape:
            raise CorruptFileError(f"Section {name} has shape {arrays[name].shape}, expected {target.shape}.")
    for name, target in targets.items():
        target[...] = arrays[name]
    logger.info("Loaded checkpoint %s (%s, epoch %d, step %d)", checkpoint, pipeline.mode.value, epoch, step)
    return TrainState(pipeline=pipeline, epoch=epoch, step=step), config


def checkpoint_digest(path: str | Path) -> str:
    return Path(path).read_bytes()[-CHECKSUM_SIZE:].hex()
