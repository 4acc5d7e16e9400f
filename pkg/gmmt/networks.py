from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import (
    NormParams,
    Param,
    Tensor,
    as_tensor,
    batch_norm,
    broadcast_spatial,
    channel_concat,
    conv2d,
    get_dtype,
    instance_norm,
    linear,
    relu,
    reshape,
    sigmoid,
    spatial_mean,
)

logger = logging.getLogger(__name__)

DISCRIMINATOR_BLOCKS = 4
DISCRIMINATOR_MIN_EXTENT = 16
TIME_EMBED_BASE = 10000.0


@dataclass(frozen=True)
class DenoiserConfig:
    n: int = 2
    base_channels: int = 16
    feature_channels: int = 4
    height: int = 8
    width: int = 8
    time_embed_dim: int = 8
    num_timesteps: int = 1000
    disc_channels: int = 8
    head_channels: int = 16

    @property
    def spatial(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.feature_channels, self.height, self.width)

    def validate(self) -> None:
        extents = {
            "n": self.n,
            "base_channels": self.base_channels,
            "feature_channels": self.feature_channels,
            "height": self.height,
            "width": self.width,
            "time_embed_dim": self.time_embed_dim,
            "num_timesteps": self.num_timesteps,
            "disc_channels": self.disc_channels,
            "head_channels": self.head_channels,
        }
        for name, value in extents.items():
            if int(value) < 1:
                raise ConfigurationError(f"Denoiser {name} must be >= 1, got {value}.")
        if self.time_embed_dim % 2:
            raise ConfigurationError(f"time_embed_dim must be even, got {self.time_embed_dim}.")


@dataclass
class ConvLayer:
    weight: Param
    bias: Param

    def __call__(self, x: Tensor | np.ndarray, *, stride: int = 1, pad: int = 1) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=stride, pad=pad)

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]


@dataclass
class DenseLayer:
    weight: Param
    bias: Param

    def __call__(self, x: Tensor | np.ndarray) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]


@dataclass
class ConvBlock:
    """conv3x3 -> per-sample channel normalization -> relu."""

    conv: ConvLayer
    norm: NormParams

    def __call__(self, x: Tensor) -> Tensor:
        return relu(instance_norm(self.conv(x), self.norm))

    def parameters(self) -> list[Param]:
        return [*self.conv.parameters(), *self.norm.parameters()]


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    time_proj: DenseLayer
    encoder: list[ConvBlock]
    bottleneck: ConvBlock
    decoder: list[ConvBlock]
    output: ConvLayer

    def parameters(self) -> list[Param]:
        params = [*self.time_proj.parameters()]
        for block in (*self.encoder, self.bottleneck, *self.decoder):
            params.extend(block.parameters())
        params.extend(self.output.parameters())
        return params


@dataclass
class DiscriminatorParams:
    config: DenoiserConfig
    blocks: list[ConvLayer]
    norms: list[NormParams]
    projection: DenseLayer

    def parameters(self) -> list[Param]:
        params: list[Param] = []
        for block in self.blocks:
            params.extend(block.parameters())
        for norm in self.norms:
            params.extend(norm.parameters())
        params.extend(self.projection.parameters())
        return params

    def running_stats(self) -> dict[str, np.ndarray]:
        stats: dict[str, np.ndarray] = {}
        for index, norm in enumerate(self.norms, start=1):
            stats[f"discriminator.block{index}.norm.running_mean"] = norm.running_mean
            stats[f"discriminator.block{index}.norm.running_var"] = norm.running_var
        return stats


# --- initialisation --------------------------------------------------------


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


def make_conv(rng: np.random.Generator, in_channels: int, out_channels: int, name: str, *, zero: bool = False) -> ConvLayer:
    shape = (out_channels, in_channels, 3, 3)
    weight = np.zeros(shape, dtype=get_dtype()) if zero else _uniform(rng, shape, in_channels * 9)
    return ConvLayer(
        weight=Param(weight, f"{name}.weight"),
        bias=Param(np.zeros(out_channels, dtype=get_dtype()), f"{name}.bias"),
    )


def make_dense(rng: np.random.Generator, in_features: int, out_features: int, name: str) -> DenseLayer:
    return DenseLayer(
        weight=Param(_uniform(rng, (out_features, in_features), in_features), f"{name}.weight"),
        bias=Param(np.zeros(out_features, dtype=get_dtype()), f"{name}.bias"),
    )


def _conv_block(rng: np.random.Generator, in_channels: int, out_channels: int, name: str) -> ConvBlock:
    return ConvBlock(
        conv=make_conv(rng, in_channels, out_channels, f"{name}.conv"),
        norm=NormParams.create(out_channels, f"{name}.norm"),
    )


def parameter_count(config: DenoiserConfig) -> int:
    """(E^2+E) + [9(3C+E)B+3B] + (n-1)[9B^2+3B] + [9B^2+3B] + n[18B^2+3B] + [9BC+C]."""
    n, b, c, e = config.n, config.base_channels, config.feature_channels, config.time_embed_dim
    return (
        (e * e + e)
        + (9 * (3 * c + e) * b + 3 * b)
        + (n - 1) * (9 * b * b + 3 * b)
        + (9 * b * b + 3 * b)
        + n * (18 * b * b + 3 * b)
        + (9 * b * c + c)
    )


def count_parameters(params: DenoiserParams | DiscriminatorParams) -> int:
    return sum(param.size for param in params.parameters())


def build_denoiser(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    config.validate()
    c, b, e = config.feature_channels, config.base_channels, config.time_embed_dim
    time_proj = make_dense(rng, e, e, "denoiser.time_proj")
    encoder = [
        _conv_block(rng, 3 * c + e if index == 1 else b, b, f"denoiser.enc{index}")
        for index in range(1, config.n + 1)
    ]
    bottleneck = _conv_block(rng, b, b, "denoiser.bottleneck")
    decoder = [_conv_block(rng, 2 * b, b, f"denoiser.dec{index}") for index in range(1, config.n + 1)]
    output = make_conv(rng, b, c, "denoiser.output", zero=True)
    params = DenoiserParams(config, time_proj, encoder, bottleneck, decoder, output)

    expected = parameter_count(config)
    actual = count_parameters(params)
    if actual != expected:
        raise ConfigurationError(f"Denoiser has {actual} parameters, expected {expected}.")
    logger.debug("Built denoiser n=%d base=%d with %d parameters", config.n, b, actual)
    return params


def build_discriminator(config: DenoiserConfig, rng: np.random.Generator) -> DiscriminatorParams:
    config.validate()
    if min(config.height, config.width) < DISCRIMINATOR_MIN_EXTENT:
        raise ConfigurationError(
            f"Discriminator needs spatial extent >= {DISCRIMINATOR_MIN_EXTENT} for four stride-2 stages, "
            f"got {config.height}x{config.width}."
        )
    d = config.disc_channels
    widths = [3 * config.feature_channels, d, 2 * d, 4 * d, 4 * d]
    blocks = [
        make_conv(rng, widths[index], widths[index + 1], f"discriminator.block{index + 1}.conv")
        for index in range(DISCRIMINATOR_BLOCKS)
    ]
    norms = [NormParams.create(widths[index + 1], f"discriminator.block{index + 1}.norm") for index in range(DISCRIMINATOR_BLOCKS - 1)]
    projection = make_dense(rng, widths[-1], 1, "discriminator.projection")
    params = DiscriminatorParams(config, blocks, norms, projection)
    _check_discriminator_structure(params)
    return params


def _check_discriminator_structure(params: DiscriminatorParams) -> None:
    if len(params.blocks) != DISCRIMINATOR_BLOCKS:
        raise ConfigurationError(f"Discriminator must have {DISCRIMINATOR_BLOCKS} blocks, got {len(params.blocks)}.")
    # Normalization and relu follow blocks 1-3 only.
    if len(params.norms) != DISCRIMINATOR_BLOCKS - 1:
        raise ConfigurationError(
            f"Discriminator must normalize exactly {DISCRIMINATOR_BLOCKS - 1} blocks, got {len(params.norms)}."
        )
    if params.projection.weight.shape[0] != 1:
        raise ConfigurationError("Discriminator projection must emit a single logit.")


# --- forward passes --------------------------------------------------------


def time_embed(t: int | np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding: element 2k = sin(t / 10000^(2k/dim)), 2k+1 = cos(same).

    Returns ``[dim]`` for a scalar ``t`` and ``[N, dim]`` for a vector of steps.
    """
    if dim < 2 or dim % 2:
        raise ConfigurationError(f"Time embedding dimension must be even, got {dim}.")
    steps = np.asarray(t, dtype=np.float64)
    if np.any(steps < 0):
        raise ConfigurationError(f"Timestep must be >= 0, got {t}.")
    frequencies = TIME_EMBED_BASE ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = steps[..., None] * frequencies
    embedding = np.empty(steps.shape + (dim,), dtype=np.float64)
    embedding[..., 0::2] = np.sin(angles)
    embedding[..., 1::2] = np.cos(angles)
    return embedding


def _batched(x: Tensor | np.ndarray) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1, *x.shape)), True
    if x.ndim != 4:
        raise ShapeError(f"Expected a feature map [C, H, W] or batch [N, C, H, W], got {x.shape}.")
    return x, False


def denoiser_forward(
    params: DenoiserParams,
    x_t: Tensor | np.ndarray,
    f_rgb: Tensor | np.ndarray,
    f_tir: Tensor | np.ndarray,
    t: int | np.ndarray,
) -> Tensor:
    """Noise prediction (diffusion) or fused* (generator) with the shape of ``x_t``.

    Input channels are concatenated in the order x_t, f_rgb, f_tir, time embedding.
    """
    config = params.config
    x, unbatched = _batched(x_t)
    rgb, _ = _batched(f_rgb)
    tir, _ = _batched(f_tir)
    expected = (config.feature_channels, config.height, config.width)
    for label, tensor in (("x_t", x), ("f_rgb", rgb), ("f_tir", tir)):
        if tensor.shape[1:] != expected or tensor.shape[0] != x.shape[0]:
            raise ShapeError(f"{label} has shape {tensor.shape}, expected [{x.shape[0]}, {', '.join(map(str, expected))}].")
    steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    if steps.min() < 0 or steps.max() > config.num_timesteps:
        raise ConfigurationError(f"Timestep {t} outside [0, {config.num_timesteps}].")

    embedding = params.time_proj(time_embed(steps, config.time_embed_dim))
    hidden = channel_concat(x, rgb, tir, broadcast_spatial(embedding, config.height, config.width))
    skips: list[Tensor] = []
    for block in params.encoder:
        hidden = block(hidden)
        skips.append(hidden)
    hidden = params.bottleneck(hidden)
    for block, skip in zip(params.decoder, reversed(skips)):
        hidden = block(channel_concat(hidden, skip))
    out = params.output(hidden)
    return reshape(out, out.shape[1:]) if unbatched else out


def discriminator_forward(
    params: DiscriminatorParams,
    x: Tensor | np.ndarray,
    f_rgb: Tensor | np.ndarray,
    f_tir: Tensor | np.ndarray,
    *,
    training: bool = True,
    update_running: bool = True,
) -> Tensor:
    """Probability that ``x`` is the real fused map given the two modalities, shape [N, 1]."""
    hidden = channel_concat(_batched(x)[0], _batched(f_rgb)[0], _batched(f_tir)[0])
    for index, block in enumerate(params.blocks):
        hidden = block(hidden, stride=2, pad=1)
        if index < len(params.norms):
            hidden = relu(batch_norm(hidden, params.norms[index], training=training, update_running=update_running))
    return sigmoid(params.projection(spatial_mean(hidden)))
