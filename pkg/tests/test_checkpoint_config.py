import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyfer.checkpoint import MAGIC, decode, encode, load_checkpoint, load_model, save_checkpoint, save_model
from noisyfer.config import RunConfig, apply_overrides, defaults_table, dump_config, flatten, load_config, parse_text
from noisyfer.errors import ConfigError, InputError
from noisyfer.model import DESK_MODEL, Model
from noisyfer.tensor import Rng

from conftest import random_video

# -- checkpoints -------------------------------------------------------------


def test_checkpoint_layout_by_hand():
    blob = encode({"b": np.array([1.5]), "a": np.zeros((2, 1))}, {"k": 1})
    meta = b'{"k": 1}'
    expected = (
        MAGIC
        + struct.pack("<I", len(meta))
        + meta
        + struct.pack("<I", 2)
        + struct.pack("<H", 1)
        + b"a"
        + struct.pack("<B", 2)
        + struct.pack("<2I", 2, 1)
        + struct.pack("<2d", 0.0, 0.0)
        + struct.pack("<H", 1)
        + b"b"
        + struct.pack("<B", 1)
        + struct.pack("<I", 1)
        + struct.pack("<d", 1.5)
    )
    assert blob == expected


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abcxyz.", min_size=1, max_size=8), st.lists(st.integers(1, 4), max_size=3), max_size=5))
def test_checkpoint_round_trip_property(shapes):
    r = Rng(0)
    state = {k: r.normal(size=tuple(v)) for k, v in shapes.items()}
    back, meta = decode(encode(state, {"x": [1, 2]}))
    assert meta == {"x": [1, 2]} and set(back) == set(state)
    for k in state:
        assert back[k].tobytes() == np.asarray(state[k]).tobytes() and back[k].shape == np.shape(state[k])


@pytest.mark.parametrize("cut", [3, 12, 30, -1])
def test_checkpoint_truncation(cut):
    blob = encode({"w": np.ones((2, 2))})
    with pytest.raises(InputError):
        decode(blob[:cut])


def test_checkpoint_bad_magic_and_trailing():
    blob = encode({"w": np.ones(2)})
    with pytest.raises(InputError, match="magic"):
        decode(b"X" + blob[1:])
    with pytest.raises(InputError, match="trailing"):
        decode(blob + b"\0")


def test_model_save_load(tmp_path, rng):
    m = Model(DESK_MODEL, seed=3)
    save_model(tmp_path / "m.ckpt", m, {"generation": 2})
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["generation"] == 2 and back.config == m.config
    v = random_video(rng)
    assert np.array_equal(back.classify_video(v)[0].data, m.classify_video(v)[0].data)
    # equal states give equal files
    save_model(tmp_path / "n.ckpt", back, {"generation": 2})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_load_errors(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "bare.ckpt", {"w": np.ones(1)})
    with pytest.raises(InputError, match="model config"):
        load_model(tmp_path / "bare.ckpt")


# -- configuration ----------------------------------------------------------------


def test_dump_load_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(RunConfig()))
    assert load_config(path) == RunConfig()


def test_overrides_typed(tmp_path):
    cfg = apply_overrides(
        RunConfig(),
        {
            "seed": "7",
            "train.base_lr": "3e-3",
            "noise.enabled": "false",
            "model.regions": "0,2",
            "selftrain.minority": "3,6",
            "model.backbone.channels_per_block": "6,12",
        },
    )
    assert cfg.seed == 7 and cfg.train.base_lr == 3e-3 and cfg.noise.enabled is False
    assert cfg.model.regions == (0, 2) and cfg.selftrain.minority == (3, 6)
    assert cfg.model.backbone.channels_per_block == (6, 12)
    back = apply_overrides(cfg, {"selftrain.minority": "none"})
    assert back.selftrain.minority is None


@pytest.mark.parametrize(
    "pairs",
    [
        {"nope": "1"},
        {"train": "1"},
        {"train.epochs": "ten"},
        {"noise.enabled": "yes"},
        {"model.backbone.channels_per_block": "10,20"},
        {"noise.op_count_range": "1,2,3"},
        {"train.noise": "x"},
    ],
)
def test_override_errors(pairs):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), pairs)


def test_parse_text_rules():
    assert parse_text("# c\n a = 1 # trailing\n\nb=x\n") == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError, match="line 2"):
        parse_text("a = 1\nbroken\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("a = 1\na = 2\n")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_defaults_table_lists_every_key():
    table = defaults_table()
    for key in flatten(RunConfig()):
        assert f"`{key}`" in table


def test_derived_configs():
    cfg = apply_overrides(RunConfig(), {"selftrain.student_blocks": "12,24,48", "selftrain.ratio": "2"})
    st_cfg = cfg.selftrain_config()
    assert st_cfg.ratio == 2 and st_cfg.student_model.backbone.num_blocks == 3
    assert cfg.train_config().noise.enabled is False
    assert cfg.clip_rule().min_frames == 30
