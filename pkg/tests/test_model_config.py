from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from convserve.errors import ConfigError
from convserve.model_config import PRESETS, ModelConfig, chunk_bytes, get_preset, kv_token_bytes


def test_opt13b_kv_token_bytes():
    # 2 (K and V) * 40 layers * 5120 * 2 bytes
    assert kv_token_bytes(get_preset("opt-13b")) == 819_200
    assert kv_token_bytes(get_preset("opt-13b")) / 2**20 == pytest.approx(0.78, abs=0.005)


def test_gqa_13b_is_a_quarter_of_mha():
    assert kv_token_bytes(get_preset("llama2-13b")) == 204_800
    assert Fraction(kv_token_bytes(get_preset("llama2-13b")), kv_token_bytes(get_preset("opt-13b"))) == Fraction(1, 4)


def test_opt66b_ratio_to_opt13b():
    ratio = Fraction(kv_token_bytes(get_preset("opt-66b")), kv_token_bytes(get_preset("opt-13b")))
    assert ratio == Fraction(288, 100)


def test_llama70b_gqa_factor():
    cfg = get_preset("llama2-70b")
    mha = ModelConfig("mha", cfg.n_layer, cfg.hidden, cfg.n_head, cfg.n_head, cfg.head_size)
    assert Fraction(kv_token_bytes(cfg), kv_token_bytes(mha)) == Fraction(1, 8)


def test_zero_layers_is_zero_bytes():
    assert kv_token_bytes(ModelConfig("z", 0, 256, 2, 2, 128)) == 0


def test_chunk_bytes_examples():
    opt = get_preset("opt-13b")
    assert chunk_bytes(opt, 32) == 26_214_400
    assert chunk_bytes(opt, 1) == kv_token_bytes(opt)
    assert chunk_bytes(get_preset("llama2-70b"), 32) == 2_621_440


def test_chunk_size_zero_rejected():
    with pytest.raises(ValueError):
        chunk_bytes(get_preset("opt-13b"), 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(hidden=5000),  # hidden != n_head * head_size
        dict(n_kv_head=7),  # not a divisor of n_head
        dict(n_partitions=0),
        dict(n_partitions=3),  # does not divide n_kv_head
    ],
)
def test_invalid_geometry_rejected(kwargs):
    base = dict(name="x", n_layer=2, hidden=5120, n_head=40, n_kv_head=40, head_size=128)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        ModelConfig(**base)


def test_presets_and_unknown_name():
    assert set(PRESETS) == {"opt-13b", "opt-66b", "llama2-13b", "llama2-70b"}
    assert get_preset("OPT-13B") is PRESETS["opt-13b"]
    with pytest.raises(ConfigError):
        get_preset("gpt-5")


def test_from_file(tmp_path):
    path = tmp_path / "m.cfg"
    path.write_text("name = tiny\nn_layer = 2\nhidden = 256\nn_head = 4\nn_kv_head = 2\nhead_size = 64\n")
    cfg = ModelConfig.from_file(path)
    assert cfg.group_size == 2
    assert kv_token_bytes(cfg) == 2 * 2 * 128 * 2


def test_from_file_unknown_key(tmp_path):
    path = tmp_path / "m.cfg"
    path.write_text("name = tiny\nlayers = 2\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_file(path)


@given(st.integers(1, 96), st.sampled_from([1, 2, 4, 8]), st.integers(1, 8))
def test_linear_in_layers_and_kv_heads(n_layer, n_kv, mult):
    head_size = 64
    cfg = ModelConfig("a", n_layer, 8 * head_size, 8, n_kv, head_size)
    doubled_layers = ModelConfig("b", 2 * n_layer, 8 * head_size, 8, n_kv, head_size)
    assert kv_token_bytes(doubled_layers) == 2 * kv_token_bytes(cfg)
    if 2 * n_kv <= 8:
        doubled_heads = ModelConfig("c", n_layer, 8 * head_size, 8, 2 * n_kv, head_size)
        assert kv_token_bytes(doubled_heads) == 2 * kv_token_bytes(cfg)
    assert chunk_bytes(cfg, mult) == mult * kv_token_bytes(cfg)
