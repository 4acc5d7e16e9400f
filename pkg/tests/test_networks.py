import numpy as np
import pytest

from gmmt.errors import ConfigurationError, ShapeError
from gmmt.networks import (
    DenoiserConfig,
    build_denoiser,
    build_discriminator,
    count_parameters,
    denoiser_forward,
    discriminator_forward,
    parameter_count,
    time_embed,
)
from gmmt.tensor import Tensor, grad_check


def test_parameter_count_formula_matches_built_network() -> None:
    config = DenoiserConfig()
    params = build_denoiser(config, np.random.default_rng(0))

    assert parameter_count(config) == 17596
    assert count_parameters(params) == 17596


@pytest.mark.parametrize("blocks", [1, 2, 3])
def test_parameter_count_for_block_counts(blocks: int) -> None:
    config = DenoiserConfig(n=blocks, base_channels=8, feature_channels=3)
    assert count_parameters(build_denoiser(config, np.random.default_rng(1))) == parameter_count(config)


def test_parameter_names_are_unique() -> None:
    params = build_denoiser(DenoiserConfig(), np.random.default_rng(0))
    names = [param.name for param in params.parameters()]

    assert len(names) == len(set(names))
    assert "denoiser.enc1.conv.weight" in names
    assert "denoiser.output.bias" in names


def test_time_embed() -> None:
    np.testing.assert_allclose(time_embed(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])
    assert time_embed(np.array([1, 5, 9]), 8).shape == (3, 8)
    np.testing.assert_allclose(time_embed(np.array([3, 7]), 4)[1], time_embed(7, 4))
    with pytest.raises(ConfigurationError):
        time_embed(1, 5)


def test_denoiser_output_starts_at_zero_and_keeps_shape() -> None:
    config = DenoiserConfig()
    params = build_denoiser(config, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    sample = rng.standard_normal(config.feature_shape)

    single = denoiser_forward(params, sample, sample, sample, 10)
    batch = denoiser_forward(params, sample[None].repeat(2, 0), sample[None].repeat(2, 0), sample[None].repeat(2, 0), np.array([1, 2]))

    assert single.shape == config.feature_shape
    assert batch.shape == (2, *config.feature_shape)
    assert not single.data.any()


def test_denoiser_forward_errors() -> None:
    config = DenoiserConfig()
    params = build_denoiser(config, np.random.default_rng(0))
    good = np.zeros(config.feature_shape)
    with pytest.raises(ShapeError):
        denoiser_forward(params, good, np.zeros((4, 8, 7)), good, 1)
    with pytest.raises(ConfigurationError):
        denoiser_forward(params, good, good, good, config.num_timesteps + 1)


@pytest.mark.parametrize("seed", range(20))
def test_full_denoiser_gradients(seed: int) -> None:
    config = DenoiserConfig(n=2, feature_channels=4, height=8, width=8)
    rng = np.random.default_rng(seed)
    params = build_denoiser(config, rng)
    params.output.weight.data[...] = rng.uniform(-0.2, 0.2, params.output.weight.shape)
    x_t = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    f_rgb = rng.standard_normal((2, 4, 8, 8))
    f_tir = rng.standard_normal((2, 4, 8, 8))
    steps = np.array([3, 700])
    inputs = [x_t, params.time_proj.weight, params.encoder[0].conv.weight, params.decoder[-1].norm.gamma, params.output.weight]

    error = grad_check(lambda: denoiser_forward(params, x_t, f_rgb, f_tir, steps), inputs, seed=seed, max_entries=12)

    assert error < 1e-5


CONCAT_CONFIG = DenoiserConfig(n=1, base_channels=4, feature_channels=2, height=8, width=8, time_embed_dim=4, num_timesteps=50)


def _concat_inputs(seed: int) -> dict[str, np.ndarray | int]:
    rng = np.random.default_rng(seed)
    shape = (1, *CONCAT_CONFIG.feature_shape)
    return {"x_t": rng.standard_normal(shape), "f_rgb": rng.standard_normal(shape), "f_tir": rng.standard_normal(shape), "t": 5}


@pytest.mark.parametrize(
    "kept,channels",
    [("x_t", slice(0, 2)), ("f_rgb", slice(2, 4)), ("f_tir", slice(4, 6)), ("t", slice(6, 10))],
)
def test_denoiser_concatenates_x_rgb_tir_time(kept: str, channels: slice) -> None:
    params = build_denoiser(CONCAT_CONFIG, np.random.default_rng(8))
    params.output.weight.data[...] = np.random.default_rng(9).uniform(-0.5, 0.5, params.output.weight.shape)
    first_conv = params.encoder[0].conv.weight.data
    masked = np.zeros_like(first_conv)
    masked[:, channels] = first_conv[:, channels]
    first_conv[...] = masked
    base = _concat_inputs(10)
    reference = denoiser_forward(params, **base).data

    for name in ("x_t", "f_rgb", "f_tir", "t"):
        changed = dict(base)
        changed[name] = 40 if name == "t" else _concat_inputs(11)[name]
        output = denoiser_forward(params, **changed).data
        if name == kept:
            assert np.abs(output - reference).max() > 1e-6, name
        else:
            np.testing.assert_allclose(output, reference, rtol=0.0, atol=1e-12, err_msg=name)


def test_denoiser_output_matches_golden(golden) -> None:
    params = build_denoiser(CONCAT_CONFIG, np.random.default_rng(8))
    params.output.weight.data[...] = np.random.default_rng(9).uniform(-0.5, 0.5, params.output.weight.shape)
    output = denoiser_forward(params, **_concat_inputs(10)).data

    stored = golden("denoiser_output.f64", output.astype("<f8").tobytes(), exact=False)

    np.testing.assert_allclose(output, np.frombuffer(stored, dtype="<f8").reshape(output.shape), rtol=1e-9, atol=1e-12)


def test_discriminator_structure_and_range() -> None:
    config = DenoiserConfig(feature_channels=4, height=16, width=16)
    params = build_discriminator(config, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    maps = [rng.standard_normal((3, 4, 16, 16)) for _ in range(3)]

    out = discriminator_forward(params, *maps)

    assert len(params.blocks) == 4
    assert len(params.norms) == 3
    assert [block.weight.shape[0] for block in params.blocks] == [8, 16, 32, 32]
    assert out.shape == (3, 1)
    assert np.all((out.data > 0) & (out.data < 1))


def test_discriminator_needs_sixteen_cells() -> None:
    with pytest.raises(ConfigurationError):
        build_discriminator(DenoiserConfig(height=8, width=8), np.random.default_rng(0))


def test_discriminator_frozen_statistics() -> None:
    config = DenoiserConfig(feature_channels=2, height=16, width=16)
    params = build_discriminator(config, np.random.default_rng(6))
    maps = [np.random.default_rng(7 + k).standard_normal((2, 2, 16, 16)) for k in range(3)]
    before = {name: values.copy() for name, values in params.running_stats().items()}

    discriminator_forward(params, *maps, update_running=False)
    for name, values in params.running_stats().items():
        np.testing.assert_array_equal(values, before[name])

    discriminator_forward(params, *maps)
    assert any(not np.array_equal(values, before[name]) for name, values in params.running_stats().items())


@pytest.mark.parametrize("seed", range(3))
def test_discriminator_gradients(seed: int) -> None:
    config = DenoiserConfig(feature_channels=2, height=16, width=16, disc_channels=4)
    rng = np.random.default_rng(seed)
    params = build_discriminator(config, rng)
    x = Tensor(rng.standard_normal((3, 2, 16, 16)), requires_grad=True)
    f_rgb = rng.standard_normal((3, 2, 16, 16))
    f_tir = rng.standard_normal((3, 2, 16, 16))
    inputs = [x, params.blocks[0].weight, params.norms[1].gamma, params.projection.weight]

    error = grad_check(
        lambda: discriminator_forward(params, x, f_rgb, f_tir, update_running=False),
        inputs,
        seed=seed,
        max_entries=12,
    )

    assert error < 1e-5
