import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddaformer.data import DegradeSpec, make_pairs
from mddaformer.errors import DimensionError, NonFiniteError, TrainingAborted
from mddaformer.metrics import psnr
from mddaformer.network import ModelConfig, build_model
from mddaformer.tensor import Tensor
from mddaformer.train import (OptState, Schedule, adamw_step, cosine_lr, make_batch, psnr_loss,
                              train_loop, write_trace_csv)


@pytest.fixture(scope="module")
def pairs():
    r = np.random.default_rng(0)
    imgs = [r.uniform(0.2, 0.8, (1, 3, 24, 24)).astype(np.float32) for _ in range(2)]
    return make_pairs(imgs, DegradeSpec(sigma=25.0), 16, 2, seed=0)


def test_cosine_endpoints_and_midpoint():
    s = Schedule(1e-3, 1e-5, 100)
    assert cosine_lr(0, s) == pytest.approx(1e-3)
    assert cosine_lr(100, s) == pytest.approx(1e-5)
    assert cosine_lr(50, s) == pytest.approx((1e-3 + 1e-5) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999))
def test_cosine_monotone_and_bounded(step):
    s = Schedule(2e-4, 1e-6, 1000)
    assert 1e-6 - 1e-15 <= cosine_lr(step + 1, s) <= cosine_lr(step, s) <= 2e-4 + 1e-15


def test_cosine_out_of_range_warns():
    with pytest.warns(UserWarning):
        assert cosine_lr(11, Schedule(1.0, 0.1, 10)) == 0.1


def reference_adamw(theta, grads, lr, b1=0.9, b2=0.999, wd=0.02, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        theta = theta - lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adamw_matches_scalar_reference():
    p = Tensor(np.array([0.7]), requires_grad=True)
    s = OptState()
    gs = [0.3, -1.2, 0.05, 2.0]
    for g in gs:
        adamw_step([("p", p)], [np.array([g])], s, 1e-2)
    assert p.data[0] == pytest.approx(reference_adamw(0.7, gs, 1e-2), rel=1e-12)
    assert s.step == 4


def test_adamw_first_step_is_lr_sized():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    adamw_step([("p", p)], [np.array([5.0, -1e-3])], OptState(), 0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-4)


def test_adamw_rejects_nonfinite_before_touching_anything():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    s = OptState()
    with pytest.raises(NonFiniteError, match="'b'"):
        adamw_step([("a", a), ("b", b)], [np.ones(2), np.array([1.0, np.nan])], s, 0.1)
    assert s.step == 0 and np.array_equal(a.data, np.ones(2))


def test_adamw_shape_mismatch():
    a = Tensor(np.ones(2))
    with pytest.raises(DimensionError):
        adamw_step([("a", a)], [np.ones(3)], OptState(), 0.1)


def test_psnr_loss_is_negative_psnr(rng):
    a, b = rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8))
    assert psnr_loss(Tensor(a), Tensor(b)).item() == pytest.approx(-psnr(a, b), abs=1e-6)


def test_batch_is_pure_function_of_seed_and_step(pairs):
    x1, y1 = make_batch(pairs, 3, 5, 17)
    x2, y2 = make_batch(pairs, 3, 5, 17)
    x3, _ = make_batch(pairs, 3, 5, 18)
    assert np.array_equal(x1.data, x2.data) and np.array_equal(y1.data, y2.data)
    assert not np.array_equal(x1.data, x3.data)
    assert x1.shape == (3, 3, 16, 16)


def run(pairs, steps, seed=0, **kw):
    m = build_model(ModelConfig.tiny(), seed=seed)
    return train_loop(m, pairs, steps, 2, seed, schedule=Schedule(2e-3, 1e-6, 20), eval_every=0, **kw)


def test_same_seed_same_trace(pairs):
    a = [(r.lr, r.loss) for r in run(pairs, 6).trace]
    b = [(r.lr, r.loss) for r in run(pairs, 6).trace]
    assert a == b


def test_loss_goes_down(pairs):
    trace = run(pairs, 20).trace
    assert np.mean([r.loss for r in trace[-5:]]) < np.mean([r.loss for r in trace[:5]])


def test_eval_psnr_recorded(pairs):
    m = build_model(ModelConfig.tiny())
    res = train_loop(m, pairs, 4, 2, 0, eval_every=2)
    assert [r.eval_psnr is not None for r in res.trace] == [False, True, False, True]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_step_and_checkpoint(pairs, tmp_path):
    m = build_model(ModelConfig.tiny())

    def poison(row):
        if row.step == 2:
            m.tail2.weight.data[...] = 3e38

    with pytest.raises(TrainingAborted, match=r"step 2: .*step-0000002\.ckpt"):
        train_loop(m, pairs, 5, 2, 0, ckpt_every=1, ckpt_dir=tmp_path, on_step=poison)


def test_trace_csv(tmp_path, pairs):
    res = run(pairs, 3)
    write_trace_csv(res.trace, tmp_path / "loss.csv")
    write_trace_csv(res.trace[:1], tmp_path / "loss.csv", append=True)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,eval_psnr" and len(lines) == 5
