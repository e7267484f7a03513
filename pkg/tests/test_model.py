import numpy as np
import pytest

from siwnet import model as M
from siwnet import tensor as T
from siwnet.model import ModelConfig, ModelFileError


@pytest.fixture(scope="module")
def tiny():
    return M.build(ModelConfig.tiny(), seed=3)


def test_full_default_accounting():
    cfg = ModelConfig()
    n = M.param_count(cfg)
    assert 4.5e6 <= n <= 5.6e6
    assert abs(M.flop_estimate(cfg) / 1e9 - 4.23) <= 0.25 * 4.23
    assert cfg.feature_map_sizes() == [162, 81, 81, 41, 21, 11]


def test_param_count_matches_built_model(tiny):
    assert tiny.num_parameters() == M.param_count(tiny.config)
    cfg = ModelConfig.tiny(channel_schedule=[8, 8, 16], pi_hidden=[4])
    assert M.build(cfg).num_parameters() == M.param_count(cfg)


def test_flop_estimate_counts_conv_macs_by_hand():
    # single block, no projection: stem conv + bn + relu, two 3x3 convs, GAP, heads
    cfg = ModelConfig(input_size=8, stem_channels=2, channel_schedule=[2], pi_hidden=[], stem_pool=False)
    s = 4  # 8 -> 4 after the 7x7/2 stem with padding 3
    stem = 2 * 49 * 3 * 2 * s * s + 3 * 2 * s * s
    block = 2 * (2 * 9 * 2 * 2 * s * s) + 3 * 2 * s * s + 2 * 2 * s * s + 2 * 2 * s * s
    heads = 2 * s * s + (2 * 2 + 1) + (2 * 3 + 2)
    assert M.flop_estimate(cfg) == stem + block + heads


@pytest.mark.parametrize("n", [1, 2, 32])
def test_forward_shapes_and_ranges(tiny, n):
    x = np.random.default_rng(n).normal(size=(n, 3, 32, 32)).astype(np.float32)
    f, s = tiny.predict(x)
    assert f.shape == (n,) and s.shape == (n,)
    assert np.all((f > 0) & (f < 1)) and np.all((s > 0) & (s < 1))


def test_wrong_input_size_is_rejected(tiny):
    with pytest.raises(ValueError, match="expected input of shape"):
        tiny.predict(np.zeros((1, 3, 30, 30), np.float32))


def test_same_seed_same_weights():
    a = M.build(ModelConfig.tiny(), seed=5)
    b = M.build(ModelConfig.tiny(), seed=5)
    c = M.build(ModelConfig.tiny(), seed=6)
    assert a.group_digest() == b.group_digest() != c.group_digest()


def test_eval_forward_is_deterministic_and_does_not_touch_buffers(tiny):
    x = np.random.default_rng(0).normal(size=(4, 3, 32, 32)).astype(np.float32)
    before = tiny.group_digest()
    f1, s1 = tiny.predict(x)
    f2, s2 = tiny.predict(x)
    assert np.array_equal(f1, f2) and np.array_equal(s1, s2)
    assert tiny.group_digest() == before


def test_dropout_only_in_training(tiny):
    x = T.Tensor(np.random.default_rng(1).normal(size=(4, 3, 32, 32)).astype(np.float32))
    m = tiny.copy()
    with T.no_grad():
        feats = m.features(x, training=False)
        f = m.point(feats)
        s_eval = m.interval_head(feats, f, training=False).data
        s_a = m.interval_head(feats, f, training=True, rng=1).data
        s_b = m.interval_head(feats, f, training=True, rng=2).data
    assert not np.array_equal(s_a, s_b)
    assert np.array_equal(s_eval, m.interval_head(feats, f, training=False).data)


def test_interval_head_sees_point_estimate(tiny):
    m = tiny.copy()
    feats = T.Tensor(np.ones((1, m.config.channel_schedule[-1]), np.float32))
    with T.no_grad():
        a = m.interval_head(feats, T.Tensor(np.array([0.1], np.float32))).data
        b = m.interval_head(feats, T.Tensor(np.array([0.9], np.float32))).data
    assert a[0] != b[0]


def test_ablation_flags_remove_sigmoids():
    cfg = ModelConfig.tiny(point_sigmoid=False, pi_sigmoid=False)
    m = M.build(cfg, seed=0)
    x = np.random.default_rng(0).normal(0, 5, size=(16, 3, 32, 32)).astype(np.float32)
    f, s = m.predict(x)
    assert np.any(f < 0) or np.any(f > 1) or np.any(s < 0)


def test_save_load_round_trip(tmp_path, tiny):
    m = tiny.copy()
    m.meta["pixel_mean"] = [0.5, 0.5, 0.5]
    m.meta["pixel_std"] = [0.2, 0.2, 0.2]
    p = tmp_path / "m.siwn"
    M.save(m, p)
    r = M.load(p)
    assert r.group_digest() == m.group_digest()
    assert r.meta == m.meta and r.config == m.config
    assert M.to_bytes(r) == p.read_bytes()


def test_float64_round_trip(tmp_path):
    m = M.build(ModelConfig.tiny(), dtype=np.float64)
    p = tmp_path / "m64.siwn"
    M.save(m, p)
    assert M.load(p).dtype == np.float64


@pytest.mark.parametrize("cut", [3, 10, 200, -1])
def test_truncated_file_is_an_error(tmp_path, tiny, cut):
    raw = M.to_bytes(tiny)
    with pytest.raises(ModelFileError, match="truncated"):
        M.from_bytes(raw[:cut])


def test_corrupt_headers(tiny):
    raw = M.to_bytes(tiny)
    with pytest.raises(ModelFileError, match="magic"):
        M.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelFileError, match="version"):
        M.from_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(ModelFileError, match="trailing"):
        M.from_bytes(raw + b"\x00")


def test_file_layout_starts_with_magic_version_and_header(tiny):
    import json
    import struct

    raw = M.to_bytes(tiny)
    assert raw[:4] == b"SIWN"
    version, hlen = struct.unpack("<HI", raw[4:10])
    assert version == 1
    header = json.loads(raw[10:10 + hlen])
    assert header["config"]["channel_schedule"] == [8, 16]


def test_config_validation():
    with pytest.raises(M.ConfigError):
        ModelConfig(channel_schedule=[])
    with pytest.raises(M.ConfigError):
        ModelConfig.tiny(dropout_p=1.0)
    with pytest.raises(M.ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(M.ConfigError):
        ModelConfig.tiny(input_size=0)


def test_config_dict_round_trip():
    cfg = ModelConfig.tiny(pi_hidden=[3])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
