import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddaformer import tensor as T
from mddaformer.blocks import EtbParams, MdabParams, downsample, upsample
from mddaformer.complexity import count_params_symbolic, tally
from mddaformer.errors import ConfigError, DimensionError
from mddaformer.network import (ModelConfig, build_model, count_params, expand_layout,
                                forward_features, restore)
from mddaformer.tensor import Tensor


@pytest.fixture(scope="module")
def tiny():
    return build_model(ModelConfig.tiny(), seed=3)


def zero_network(m):
    # temperature is a divisor, not a weight; it keeps its init value
    for n, p in m.named_parameters():
        if not n.endswith("temperature"):
            p.data[...] = 0.0
    return m


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 21), w=st.integers(1, 21), seed=st.integers(0, 2**31 - 1))
def test_zero_network_is_exact_identity(h, w, seed):
    m = zero_network(build_model(ModelConfig.tiny(stage_types="TCT"), seed=1, validate=False))
    x = np.random.default_rng(seed).uniform(0, 1, (1, 3, h, w)).astype(np.float32)
    assert np.array_equal(restore(m, Tensor(x)).data, x)


@pytest.mark.parametrize("h,w", [(8, 8), (13, 21), (32, 17), (5, 40)])
def test_output_shape_matches_input(tiny, h, w):
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, h, w)).astype(np.float32))
    with T.no_grad():
        assert restore(tiny, x).shape == (2, 3, h, w)


def test_odd_size_equals_cropped_padded_run(tiny, rng):
    x = rng.uniform(0, 1, (1, 3, 13, 10)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 3), (0, 6)), mode="reflect")
    with T.no_grad():
        small = restore(tiny, Tensor(x)).data
        big = restore(tiny, Tensor(xp)).data
    np.testing.assert_array_equal(small, big[..., :13, :10])


def test_stage_by_stage_recomposition(tiny, rng):
    x = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        f = T.relu(tiny.embed(x))
        skips = []
        for st_ in tiny.encoders:
            for b in st_.blocks:
                f = b(f)
            skips.append(f)
            f = downsample(f, st_.down)
        for b in tiny.latent:
            f = b(f)
        for st_, skip in zip(tiny.decoders, skips[::-1]):
            f = T.concat_channels([upsample(f, st_.up), skip])
            if st_.reduce is not None:
                f = st_.reduce(f)
            for b in st_.blocks:
                f = b(f)
        manual = T.add(x, tiny.tail2(tiny.tail1(f))).data
        np.testing.assert_array_equal(forward_features(tiny, x).data, f.data)
        np.testing.assert_array_equal(restore(tiny, x).data, manual)


def test_feature_widths(tiny):
    x = Tensor(np.zeros((1, 3, 16, 16), np.float32))
    with T.no_grad():
        assert forward_features(tiny, x).shape == (1, 16, 16, 16)


def test_same_seed_same_model_and_output(rng):
    a = build_model(ModelConfig.tiny(), seed=9)
    b = build_model(ModelConfig.tiny(), seed=9)
    c = build_model(ModelConfig.tiny(), seed=10)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))
    x = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        assert np.array_equal(restore(a, x).data, restore(b, x).data)


@pytest.mark.parametrize("layout,kinds", [("CTC", "CCCTCCC"), ("TTT", "TTTTTTT"), ("C-C-C", "CCCCCCC"),
                                          ("TCT", "TTTCTTT"), ("CCTTTCC", "CCTTTCC")])
def test_layout_places_block_types(layout, kinds):
    cfg = ModelConfig.tiny(stage_types=layout)
    assert expand_layout(layout) == kinds
    m = build_model(cfg, validate=False)
    slots = [s.blocks for s in m.encoders] + [m.latent] + [s.blocks for s in m.decoders]
    for kind, blocks in zip(kinds, slots):
        want = MdabParams if kind == "C" else EtbParams
        assert blocks and all(isinstance(b, want) for b in blocks)


@pytest.mark.parametrize("cfg", [
    ModelConfig.tiny(), ModelConfig.tiny(stage_types="TTT", heads=2),
    ModelConfig.tiny(stage_types="TCT", ffn_expansion=1.5, mdab_expansion=2.0),
    ModelConfig.small(),
])
def test_symbolic_params_equal_built_params(cfg):
    assert count_params(build_model(cfg, validate=False)) == count_params_symbolic(cfg)


@pytest.mark.parametrize("layout", ["CTC", "TTT"])
def test_instrumented_macs_match_symbolic_count(layout):
    cfg = ModelConfig.tiny(stage_types=layout)
    m = build_model(cfg, validate=False)
    with T.no_grad(), T.count_macs() as macs:
        restore(m, Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    t = tally(cfg, 32, 32)
    assert macs["conv"] == t.conv
    assert macs["linear"] == t.linear
    # Q K^T forms the map, A V applies it; the convention counts the first
    assert macs["matmul"] == 2 * t.attention


def test_bad_configs_are_named():
    with pytest.raises(ConfigError, match="latent"):
        build_model(ModelConfig.tiny(heads=3))
    with pytest.raises(ConfigError):
        ModelConfig.tiny(stage_types="CXC")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"base_dim": 8, "depth": 3})
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")
    with pytest.raises(ConfigError):
        build_model(ModelConfig.tiny(base_dim=7))


def test_config_dict_roundtrip():
    cfg = ModelConfig.small(stage_types="TCT", heads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_restore_rejects_non_rgb(tiny):
    with pytest.raises(DimensionError):
        restore(tiny, Tensor(np.zeros((1, 4, 8, 8), np.float32)))


def test_gradients_flow_to_every_parameter(tiny, rng):
    x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    tiny.zero_grad()
    T.mean_all(T.mul(restore(tiny, x), restore(tiny, x))).backward()
    missing = [n for n, p in tiny.named_parameters() if p.grad is None]
    assert missing == []
