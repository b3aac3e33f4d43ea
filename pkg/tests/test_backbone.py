import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyfer.backbone import (
    DESK_CONFIG,
    BackboneConfig,
    ResidualFeatureMap,
    forward_frame,
    forward_frames,
    init_params,
    parameter_count,
)
from noisyfer.errors import ConfigError, InputError
from noisyfer.tensor import Rng, Tensor, backward

from oracles import backbone_ref

# conv weights + scale/shift + 1x1 shortcut, summed by hand for (24, 48, 96, 192)
DEFAULT_PARAM_COUNT = 229_680


def formula_count(channels):
    total, c_in = 0, 9
    for c in channels:
        total += c * (c_in // 3) * 9 + c * (c // 3) * 9 + 4 * c + c * (c_in // 3)
        c_in = c
    return total


def test_default_parameter_count_frozen():
    params = init_params(BackboneConfig(), Rng(0))
    assert parameter_count(params) == DEFAULT_PARAM_COUNT == formula_count((24, 48, 96, 192))


@pytest.mark.parametrize("channels", [(12, 24), (6, 6, 12), (3,)])
def test_parameter_count_formula(channels):
    cfg = BackboneConfig(len(channels), channels, input_side=8)
    assert parameter_count(init_params(cfg, Rng(0))) == formula_count(channels)


def test_tap_shapes_desk():
    x = Tensor(Rng(0).normal(size=(5, 9, 8, 8)))
    taps = forward_frames(x, init_params(DESK_CONFIG, Rng(0)), DESK_CONFIG)
    assert [t.tensor.shape for t in taps] == [(5, 12, 8, 8), (5, 24, 4, 4)]
    assert [t.depth for t in taps] == [4, 8]
    assert DESK_CONFIG.tap_sides() == [8, 4]


def test_default_tap_sides():
    assert BackboneConfig().tap_sides() == [32, 16, 8, 4]
    assert BackboneConfig().region_dims() == [8, 16, 32, 64]


def test_forward_matches_reference(rng):
    cfg = BackboneConfig(3, (6, 12, 12), input_side=8)
    params = init_params(cfg, rng)
    for name in params:
        if "shift" in name:
            params[name].data += rng.normal(0, 0.1, params[name].shape)
    x = rng.normal(size=(2, 9, 8, 8))
    taps = forward_frames(Tensor(x), params, cfg)
    P = {k: v.data for k, v in params.items()}
    for i in range(2):
        ref = backbone_ref(x[i], P, cfg.num_blocks)
        for t, r in zip(taps, ref):
            np.testing.assert_allclose(t.tensor.data[i], r, atol=1e-12)


def test_forward_frame_single(rng):
    params = init_params(DESK_CONFIG, rng)
    frame = rng.normal(size=(9, 8, 8))
    one = forward_frame(Tensor(frame), params, DESK_CONFIG)
    assert one[0].tensor.shape == (1, 12, 8, 8)
    with pytest.raises(InputError):
        forward_frame(Tensor(frame[None]), params, DESK_CONFIG)


def test_region_slicing(rng):
    t = Tensor(rng.normal(size=(2, 12, 3, 3)))
    fm = ResidualFeatureMap(0, t)
    assert np.array_equal(fm.region(1).data, t.data[:, 4:8])


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2), st.integers(0, 10_000))
def test_region_independence_property(region, seed):
    rng = Rng(seed)
    params = init_params(DESK_CONFIG, Rng(1))
    x = rng.normal(size=(2, 9, 8, 8))
    y = x.copy()
    y[:, 3 * region : 3 * region + 3] += rng.normal(size=(2, 3, 8, 8))
    a = forward_frames(Tensor(x), params, DESK_CONFIG)
    b = forward_frames(Tensor(y), params, DESK_CONFIG)
    for ta, tb in zip(a, b):
        for r in range(3):
            same = np.array_equal(ta.region(r).data, tb.region(r).data)
            assert same == (r != region)


def test_backbone_gradient_flows_to_every_parameter(rng):
    params = init_params(DESK_CONFIG, rng)
    taps = forward_frames(Tensor(rng.normal(size=(1, 9, 8, 8))), params, DESK_CONFIG)
    backward(taps[-1].tensor.sum() + taps[0].tensor.sum())
    assert all(p.grad is not None for p in params.values())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_blocks": 2, "channels_per_block": (12,)},
        {"num_blocks": 1, "channels_per_block": (10,)},
        {"num_blocks": 4, "channels_per_block": (3, 3, 3, 3), "input_side": 4},
        {"groups": 2},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_wrong_input_channels(rng):
    params = init_params(DESK_CONFIG, rng)
    with pytest.raises(InputError):
        forward_frames(Tensor(np.zeros((1, 6, 8, 8))), params, DESK_CONFIG)


def test_covers():
    assert BackboneConfig().covers(DESK_CONFIG)
    assert not DESK_CONFIG.covers(BackboneConfig())
