import json
from dataclasses import replace

import numpy as np
import pytest

from noisyfer.augment import NoiseSpec
from noisyfer.backbone import BackboneConfig
from noisyfer.errors import ConfigError, InputError
from noisyfer.model import DESK_MODEL, Model, ModelConfig, config_json
from noisyfer.tensor import Rng

from conftest import random_video
from oracles import video_ref


def test_forward_matches_straight_line_reference(jittered_model, rng):
    P = {k: v.data for k, v in jittered_model.params.items()}
    for _ in range(3):
        video = random_video(rng, n=int(rng.integers(1, 4)))
        logits, diag = jittered_model.classify_video(video)
        ref_logits, ref_pen = video_ref(video, P, DESK_MODEL)
        assert np.max(np.abs(logits.data - ref_logits)) < 1e-10
        assert abs(diag["penalty"] - ref_pen) < 1e-12


def test_batched_forward_close_to_single(desk_model, rng):
    vids = [random_video(rng, n) for n in (1, 3, 2)]
    batched = desk_model.forward(vids).logits.data
    for i, v in enumerate(vids):
        single = desk_model.classify_video(v)[0].data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_frame_permutation_exact(desk_model, rng):
    v = random_video(rng, 5)
    a = desk_model.classify_video(v)[0].data
    b = desk_model.classify_video(v[[3, 1, 4, 0, 2]])[0].data
    assert np.array_equal(a, b)


def test_diagnostics_shapes(desk_model, rng):
    res = desk_model.forward([random_video(rng, 2), random_video(rng, 4)])
    diags = res.diagnostics(["a", "b"])
    assert [d["video_id"] for d in diags] == ["a", "b"]
    assert np.asarray(diags[1]["channel_alpha"]).shape == (4, 3)
    assert len(diags[0]["frame_alpha"]) == 2
    json.dumps(diags)


def test_dropout_only_in_training(desk_model, rng):
    v = random_video(rng)
    noise = NoiseSpec()
    a = desk_model.forward([v], training=False, noise=noise, rng=Rng(0)).logits.data
    b = desk_model.forward([v]).logits.data
    assert np.array_equal(a, b)
    c = desk_model.forward([v], training=True, noise=noise, rng=Rng(0)).logits.data
    assert not np.array_equal(a, c)


@pytest.mark.parametrize(
    "change",
    [
        {"all_blocks": False},
        {"spatial_attention": False},
        {"regions": (0,)},
        {"channel_attention": False},
        {"frame_attention": False},
        {"hop_mode": "concat"},
    ],
)
def test_ablation_variants_run(change, rng):
    cfg = replace(DESK_MODEL, **change)
    m = Model(cfg, seed=1)
    res = m.forward([random_video(rng, 2)])
    assert res.logits.shape == (1, 7)
    if not cfg.spatial_attention:
        assert res.penalty.data[0] == 0.0


def test_feature_length():
    assert DESK_MODEL.feature_length() == 4 + 8
    assert replace(DESK_MODEL, all_blocks=False).feature_length() == 8
    assert replace(DESK_MODEL, hop_mode="concat").feature_length() == 2 * 12
    assert ModelConfig().feature_length() == 8 + 16 + 32 + 64


def test_state_dict_round_trip(desk_model, rng):
    other = Model(DESK_MODEL, seed=99)
    other.load_state_dict(desk_model.state_dict())
    v = random_video(rng)
    assert np.array_equal(other.classify_video(v)[0].data, desk_model.classify_video(v)[0].data)
    bad = desk_model.state_dict()
    bad.pop("head.b")
    with pytest.raises(InputError):
        other.load_state_dict(bad)


def test_copy_is_independent(desk_model):
    c = desk_model.copy()
    c.params["head.b"].data[0] += 1.0
    assert desk_model.params["head.b"].data[0] == 0.0


def test_config_round_trip():
    cfg = replace(DESK_MODEL, regions=(0, 2), hop_mode="concat")
    assert ModelConfig.from_dict(json.loads(config_json(cfg))) == cfg


def test_input_validation(desk_model):
    with pytest.raises(InputError):
        desk_model.forward([])
    with pytest.raises(InputError):
        desk_model.forward([np.zeros((0, 9, 8, 8))])
    with pytest.raises(InputError):
        desk_model.forward([np.zeros((2, 9, 16, 16))])


@pytest.mark.parametrize(
    "kwargs", [{"hops": 0}, {"regions": ()}, {"regions": (0, 0)}, {"regions": (3,)}, {"hop_mode": "max"}, {"input_scale": 0.0}]
)
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(backbone=BackboneConfig(2, (12, 24), 8), **kwargs)
