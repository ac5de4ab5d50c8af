import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_conv2d, naive_matmul
from gradcases import PRIMITIVES
from mddaformer import tensor as T
from mddaformer.errors import ConfigError, DimensionError, NonFiniteError, ProbeError
from mddaformer.tensor import Tensor, grad_check


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, params = PRIMITIVES[name](np.random.default_rng(7))
    for p in params:
        assert grad_check(f, [p], n_coords=30) < 1e-4


@pytest.mark.parametrize("cin,cout,k,stride,pad,groups,bias", [
    (3, 4, 3, 1, 1, 1, True),
    (2, 2, 1, 1, 0, 1, False),
    (4, 6, 3, 2, 1, 2, True),
    (6, 6, 3, 1, 1, 6, True),
    (3, 5, 5, 1, 2, 1, True),
    (4, 4, 3, 2, 0, 4, False),
])
def test_conv2d_matches_six_loop_oracle(rng, cin, cout, k, stride, pad, groups, bias):
    x = rng.normal(size=(2, cin, 7, 6))
    w = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout) if bias else None
    got = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, pad, groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad, groups), rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3]), st.integers(3, 6),
       st.integers(0, 2**31 - 1))
def test_conv2d_oracle_random_shapes(cin, cout, k, hw, seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=(1, cin, hw, hw)), r.normal(size=(cout, cin, k, k))
    got = T.conv2d(Tensor(x), Tensor(w), pad=k // 2).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, pad=k // 2), rtol=1e-10, atol=1e-10)


def test_matmul_triple_loop(rng):
    a, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, 4, 6))
    got = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(got[i, j], naive_matmul(a[i, j], b[i, j]), rtol=1e-12)


def test_linear_is_affine_map(rng):
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(x, w.T) + b, rtol=1e-12)


def test_conv_per_sample_uses_each_samples_kernel(rng):
    x = rng.normal(size=(3, 2, 5, 5))
    w = rng.normal(size=(3, 4, 2, 3, 3))
    got = T.conv2d_per_sample(Tensor(x), Tensor(w), 1, 1).data
    for i in range(3):
        np.testing.assert_allclose(got[i:i + 1], naive_conv2d(x[i:i + 1], w[i], pad=1), rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 3]), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_pixel_shuffle_roundtrip_bit_exact(n, c, r, hb, wb, seed):
    x = np.random.default_rng(seed).normal(size=(n, c, hb * r, wb * r)).astype(np.float32)
    down = T.pixel_unshuffle(Tensor(x), r)
    assert down.shape == (n, c * r * r, hb, wb)
    assert np.array_equal(T.pixel_shuffle(down, r).data, x)
    y = np.random.default_rng(seed + 1).normal(size=(n, c * r * r, hb, wb)).astype(np.float32)
    assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(y), r), r).data, y)


def test_pixel_unshuffle_channel_order():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = T.pixel_unshuffle(Tensor(x), 2).data
    # channel i*2+j holds pixels at offset (i, j)
    assert out[0, :, 0, 0].tolist() == [0, 1, 4, 5]


def test_pad_reflect_matches_numpy(rng):
    x = rng.normal(size=(1, 2, 5, 3))
    got = T.pad_reflect(Tensor(x), 3, 2).data
    np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (0, 0), (0, 3), (0, 2)), mode="reflect"))


def test_softmax_rows(rng):
    x = rng.normal(size=(2, 3, 7)) * 30
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    assert (s >= 0).all()


def test_layer_norm_normalizes_over_channels(rng):
    x = rng.normal(3.0, 2.0, size=(2, 6, 4, 5))
    y = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    loss = T.sum_all(T.add(T.mul(x, x), x))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [5.0, -5.0])


def test_backward_visits_nodes_in_reverse_order():
    seen = []

    def logged(name, t):
        def bwd(g):
            seen.append(name)
            return (g,)
        return T.custom_op(name, t.data.copy(), (t,), bwd)

    x = Tensor(np.ones(3), requires_grad=True)
    y = logged("c", logged("b", logged("a", x)))
    loss = T.sum_all(y)
    assert [n.op for n in T.get_tape().nodes] == ["a", "b", "c", "sum"]
    loss.backward()
    assert seen == ["c", "b", "a"]
    assert T.get_tape().visited == [3, 2, 1, 0]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert len(T.get_tape().nodes) == 0


def test_non_finite_error_names_op():
    a = Tensor(np.array([1.0]))
    with pytest.raises(NonFiniteError, match="div"):
        T.div(a, Tensor(np.array([0.0])))


def test_float32_is_default():
    assert Tensor([1, 2, 3]).dtype == np.float32


@pytest.mark.parametrize("wshape,groups,exc", [
    ((4, 3, 2, 2), 1, ConfigError),   # even kernel
    ((4, 2, 3, 3), 2, ConfigError),   # 3 channels not divisible by 2 groups
    ((4, 5, 3, 3), 1, DimensionError),
])
def test_conv_rejects_bad_shapes(wshape, groups, exc):
    with pytest.raises(exc):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros(wshape)), groups=groups, pad=1)


def test_count_macs_conv_formula(rng):
    x = Tensor(rng.normal(size=(2, 4, 6, 6)))
    w = Tensor(rng.normal(size=(6, 2, 3, 3)))
    with T.count_macs() as macs:
        T.conv2d(x, w, stride=2, pad=1, groups=2)
    assert macs["conv"] == 2 * 6 * 2 * 9 * 3 * 3


def test_grad_check_requires_float64():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(ConfigError):
        grad_check(lambda: T.sum_all(x), [x])


def test_grad_check_flags_nonfinite_probe():
    x = Tensor(np.array([1e-300]), requires_grad=True)
    with pytest.raises((ProbeError, NonFiniteError)):
        grad_check(lambda: T.sum_all(T.div(Tensor(np.array([1e10])), x)), [x])


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def bad():
        return T.custom_op("bad_square", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    assert grad_check(lambda: T.sum_all(bad()), [x]) > 0.3
