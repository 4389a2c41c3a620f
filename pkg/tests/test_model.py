import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvstrip.errors import CheckpointError, ConfigurationError
from mvstrip.model import (
    NetworkConfig,
    as_batch,
    build,
    count_trainable,
    forward,
    load_checkpoint,
    parameter_count,
    read_checkpoint_meta,
    save_checkpoint,
)
from mvstrip.volume import NormParams, Orientation

configs = st.builds(
    NetworkConfig,
    kernel_size=st.sampled_from([1, 3, 5]),
    depth=st.integers(1, 3),
    base_filters=st.integers(1, 6),
    convs_per_level=st.integers(1, 3),
)


def test_tiny_config_parameter_count(tiny_config):
    assert parameter_count(tiny_config) == 228
    assert count_trainable(build(tiny_config)) == 228


def test_default_config_parameter_count_closed_form():
    # enumerated once on a built default network; building it needs ~4 GB
    assert parameter_count(NetworkConfig()) == 1_027_510_306


@settings(max_examples=15, deadline=None)
@given(config=configs)
def test_parameter_count_matches_built_network(config):
    assert parameter_count(config) == count_trainable(build(config))


@settings(max_examples=30, deadline=None)
@given(config=configs)
def test_doubling_base_filters_increases_count(config):
    wider = dataclasses.replace(config, base_filters=config.base_filters * 2)
    assert parameter_count(wider) > parameter_count(config)


def test_filters_double_per_level():
    c = NetworkConfig(base_filters=32, depth=6)
    assert [c.filters(level) for level in range(7)] == [32, 64, 128, 256, 512, 1024, 2048]


@pytest.mark.parametrize(
    "kwargs", [dict(kernel_size=4), dict(kernel_size=0), dict(depth=0), dict(base_filters=0),
               dict(convs_per_level=0), dict(n_labels=1)]
)
def test_invalid_config_raises(kwargs):
    with pytest.raises(ConfigurationError):
        NetworkConfig(**kwargs)


def test_from_dict_accepts_short_aliases():
    c = NetworkConfig.from_dict({"f": 3, "L": 2, "F1": 4, "Dl": 1})
    assert (c.kernel_size, c.depth, c.base_filters, c.convs_per_level) == (3, 2, 4, 1)
    assert NetworkConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigurationError):
        NetworkConfig.from_dict({"width": 3})


def test_indivisible_input_is_rejected():
    with pytest.raises(ConfigurationError):
        NetworkConfig().check_input_size(250, 250)
    cheap = NetworkConfig(kernel_size=1, depth=6, base_filters=1, convs_per_level=1)
    net = build(cheap).eval()
    with pytest.raises(ConfigurationError):
        forward(net, np.zeros((1, 250, 250, 1)))
    assert forward(net, np.zeros((1, 64, 64, 1))).shape == (1, 64, 64, 2)


def test_wrong_channel_count_is_rejected(tiny_config):
    with pytest.raises(ValueError):
        as_batch(np.zeros((1, 8, 8, 3)), tiny_config)


def test_output_shape_and_simplex(tiny_config, rng):
    net = build(tiny_config, seed=3).eval()
    for shape in [(8, 8, 1), (16, 32, 1)]:
        out = forward(net, rng.normal(size=(2,) + shape))
        assert out.shape == (2,) + shape[:2] + (2,)
        assert np.all(out >= 0)
        assert np.allclose(out.sum(-1), 1, atol=1e-5)


def test_zero_input_gives_finite_output(tiny_config):
    out = forward(build(tiny_config).eval(), np.zeros((1, 8, 8, 1)))
    assert np.all(np.isfinite(out))


def test_eval_mode_is_batch_independent(tiny_config, rng):
    net = build(tiny_config, seed=1).eval()
    x = rng.normal(size=(1, 8, 8, 1))
    pair = forward(net, np.concatenate([x, x]))
    assert np.array_equal(pair[0], pair[1])
    assert np.allclose(forward(net, x)[0], pair[0], atol=1e-6)


def test_seeded_build_is_reproducible(tiny_config):
    a, b, c = build(tiny_config, seed=5), build(tiny_config, seed=5), build(tiny_config, seed=6)
    for (name, pa), pb, pc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(pa, pb), name
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_init_biases_zero_and_weights_fan_in_scaled():
    config = NetworkConfig(kernel_size=3, depth=1, base_filters=64, convs_per_level=1)
    net = build(config, seed=0)
    conv = net.encoder[0][0]
    assert torch.all(conv.bias == 0)
    fan_in = conv.weight[0].numel()
    assert conv.weight.std().item() == pytest.approx(np.sqrt(2 / fan_in), rel=0.15)


def test_checkpoint_round_trip(tmp_path, tiny_config, rng):
    net = build(tiny_config, seed=2, orientation=Orientation.SAGITTAL)
    net.train()
    forward(net, rng.normal(size=(4, 8, 8, 1)))  # move BN running stats off their defaults
    net.eval()
    path = tmp_path / "sagittal.pt"
    save_checkpoint(net, NormParams(), path)
    loaded, norm = load_checkpoint(path, Orientation.SAGITTAL)
    mapped, _ = load_checkpoint(path, Orientation.SAGITTAL, mmap=True)
    x = rng.normal(size=(3, 8, 8, 1))
    assert np.allclose(forward(loaded, x), forward(net, x), atol=1e-6)
    assert np.array_equal(forward(mapped, x), forward(loaded, x))
    assert count_trainable(mapped) == count_trainable(net)
    assert norm == NormParams() and loaded.orientation is Orientation.SAGITTAL
    meta = read_checkpoint_meta(path)
    assert meta["config"] == tiny_config.to_dict() and meta["seed"] == 2


def test_checkpoint_orientation_mismatch(tmp_path, tiny_config):
    path = tmp_path / "axial.pt"
    save_checkpoint(build(tiny_config, orientation=Orientation.AXIAL), None, path)
    with pytest.raises(CheckpointError, match="axial"):
        load_checkpoint(path, Orientation.CORONAL)


def test_truncated_or_missing_checkpoint(tmp_path, tiny_config):
    path = tmp_path / "net.pt"
    save_checkpoint(build(tiny_config), None, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_default_config_values():
    c = NetworkConfig()
    assert (c.kernel_size, c.depth, c.base_filters, c.convs_per_level, c.n_labels) == (7, 6, 32, 3, 2)
    assert c.size_multiple == 64
    c.check_input_size(256, 256)
