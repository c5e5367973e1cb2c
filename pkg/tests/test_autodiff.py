import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from sparsepat import autodiff as ad
from sparsepat.gradcheck import check_gradients, relative_error

F64 = np.float64


def t(arr, grad=True):
    return ad.Tensor(np.asarray(arr, dtype=F64), requires_grad=grad)


def rand(rng, *shape):
    return rng.standard_normal(shape)


def naive_conv(x, w, stride, padding):
    """Direct cross-correlation via scipy, one (out, in) channel pair at a time."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c = x.shape[:2]
    o = w.shape[0]
    outs = []
    for bi in range(b):
        chans = []
        for oi in range(o):
            acc = sum(signal.correlate2d(xp[bi, ci], w[oi, ci], mode="valid") for ci in range(c))
            chans.append(acc[::stride, ::stride])
        outs.append(chans)
    return np.array(outs)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 2)])
def test_conv2d_matches_direct_correlation(stride, padding, k):
    rng = np.random.default_rng(0)
    x, w, b = rand(rng, 2, 3, 9, 8), rand(rng, 4, 3, k, k), rand(rng, 4)
    out = ad.conv2d(t(x, False), t(w, False), t(b, False), stride=stride, padding=padding)
    ref = naive_conv(x, w, stride, padding) + b[None, :, None, None]
    assert out.shape == ref.shape
    assert np.allclose(out.data, ref, atol=1e-12)


@pytest.mark.parametrize("stride,padding,k", [(2, 0, 2), (2, 1, 4), (1, 1, 3)])
def test_conv_transpose_is_adjoint_of_conv(stride, padding, k):
    rng = np.random.default_rng(1)
    w = rand(rng, 3, 2, k, k)  # transposed layout (in=3, out=2)
    x = rand(rng, 2, 3, 5, 5)
    y_small = ad.conv_transpose2d(t(x, False), t(w, False), stride=stride, padding=padding)
    y = rand(rng, *y_small.shape)
    lhs = np.sum(y_small.data * y)
    rhs = np.sum(x * ad.conv2d(t(y, False), t(w, False), stride=stride, padding=padding).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_transpose_2x2_doubles_size():
    x = t(np.ones((1, 1, 3, 4)), False)
    w = t(np.arange(4.0).reshape(1, 1, 2, 2), False)
    out = ad.conv_transpose2d(x, w)
    assert out.shape == (1, 1, 6, 8)
    assert np.array_equal(out.data[0, 0, :2, :2], np.arange(4.0).reshape(2, 2))


def test_maxpool_forward_and_routing():
    x = np.array([[[[1, 5, 2, 0], [3, 4, 9, 1], [0, 0, 7, 8], [6, 2, 1, 1]]]], dtype=F64)
    xt = t(x)
    out = ad.maxpool2x2(xt)
    assert np.array_equal(out.data[0, 0], [[5, 9], [6, 8]])
    ad.backward(ad.sum_(out))
    expect = np.zeros_like(x)
    for r, c in [(0, 1), (1, 2), (3, 0), (2, 3)]:
        expect[0, 0, r, c] = 1
    assert np.array_equal(xt.grad, expect)


def test_maxpool_rejects_odd():
    with pytest.raises(ad.ShapeError):
        ad.maxpool2x2(t(np.zeros((1, 1, 3, 4))))


def test_batch_norm_training_stats_and_running_update():
    rng = np.random.default_rng(2)
    x = rand(rng, 4, 3, 5, 5) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = ad.batch_norm(t(x), t(np.ones(3)), t(np.zeros(3)), rm, rv, training=True, momentum=0.1)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    ref = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5)
    assert np.allclose(out.data, ref)
    n = 4 * 25
    assert np.allclose(rm, 0.1 * mu)
    assert np.allclose(rv, 0.9 + 0.1 * var * n / (n - 1))


def test_batch_norm_eval_uses_running_stats():
    x = np.full((1, 2, 2, 2), 3.0)
    out = ad.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), np.array([1.0, 3.0]),
                        np.array([4.0, 1.0]), training=False, eps=0.0)
    assert np.allclose(out.data[0, 0], 1.0)
    assert np.allclose(out.data[0, 1], 0.0)


def test_instance_norm_per_sample_per_channel():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 4, 4)
    out = ad.instance_norm(t(x), t(np.full(3, 2.0)), t(np.full(3, 0.5)))
    m = out.data.mean(axis=(2, 3))
    s = out.data.std(axis=(2, 3))
    assert np.allclose(m, 0.5)
    assert np.allclose(s, 2.0, atol=1e-4)


OP_CASES = {
    "add": (lambda ts: ad.add(ts[0], ts[1]), [(2, 3, 4, 4), (2, 3, 4, 4)]),
    "sub": (lambda ts: ad.sub(ts[0], ts[1]), [(2, 3, 4, 4), (2, 3, 4, 4)]),
    "mul": (lambda ts: ad.mul(ts[0], ts[1]), [(2, 3, 4, 4), (2, 3, 4, 4)]),
    "scale": (lambda ts: ad.scale(ts[0], -1.7), [(2, 3, 4, 4)]),
    "sigmoid": (lambda ts: ad.sigmoid(ts[0]), [(2, 3, 4, 4)]),
    "softplus": (lambda ts: ad.softplus(ts[0]), [(2, 3, 4, 4)]),
    "mean": (lambda ts: ad.mean(ts[0]), [(2, 3, 4, 4)]),
    "sum": (lambda ts: ad.sum_(ts[0]), [(2, 3, 4, 4)]),
    "concat": (lambda ts: ad.concat([ts[0], ts[1]]), [(2, 3, 4, 4), (2, 2, 4, 4)]),
    "channel_bias": (lambda ts: ad.add_channel_bias(ts[0], ts[1]), [(2, 3, 4, 4), (3,)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_elementwise_gradients(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(4)
    inputs = [t(rng.standard_normal(s)) for s in shapes]
    assert check_gradients(fn, inputs) < 1e-6


def test_kinked_ops_gradients_away_from_kinks():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep clear of the non-differentiable points
    for fn in (ad.relu, ad.abs_, lambda a: ad.clamp(a, -0.8, 0.8)):
        xx = np.where(np.abs(np.abs(x) - 0.8) < 0.05, 0.3, x)
        assert check_gradients(lambda ts: fn(ts[0]), [t(xx)]) < 1e-6


def test_sigmoid_and_softplus_do_not_overflow():
    x = t(np.array([[[[-1000.0, 0.0, 1000.0]]]]))
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s = ad.sigmoid(x)
        sp = ad.softplus(x)
    assert np.allclose(s.data.ravel(), [0.0, 0.5, 1.0])
    assert np.allclose(sp.data.ravel(), [0.0, np.log(2), 1000.0])


def test_gradients_accumulate_over_reuse():
    x = t(np.full((1, 1, 2, 2), 3.0))
    y = ad.mul(x, x)
    ad.backward(ad.sum_(ad.add(y, x)))
    assert np.allclose(x.grad, 7.0)


def test_second_backward_raises():
    x = t(np.ones((1, 1, 2, 2)))
    loss = ad.sum_(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        ad.backward(loss)


def test_backward_requires_scalar():
    x = t(np.ones((1, 1, 2, 2)))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.scale(x, 2.0))


def test_no_grad_records_nothing():
    x = t(np.ones((1, 1, 2, 2)))
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y.node is None and not y.requires_grad
    assert ad.mul(x, x).node is not None


def test_shape_errors():
    a = t(np.ones((1, 2, 3, 3)))
    with pytest.raises(ad.ShapeError):
        ad.add(a, t(np.ones((1, 2, 3, 4))))
    with pytest.raises(ad.ShapeError, match="channels"):
        ad.conv2d(a, t(np.ones((4, 3, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.concat([a, t(np.ones((1, 2, 4, 3)))])
    with pytest.raises(ad.ShapeError):
        ad.conv2d(a, t(np.ones((1, 2, 5, 5))))


def test_forward_op_dispatch():
    a = t(np.ones((1, 1, 2, 2)))
    assert np.array_equal(ad.forward_op("scale", [a], factor=3.0).data, np.full((1, 1, 2, 2), 3.0))
    with pytest.raises(ValueError, match="unknown op"):
        ad.forward_op("nope", [a])


def test_relative_error_helper():
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [0.0]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_conv_gradient_property(seed, cin, cout):
    rng = np.random.default_rng(seed)
    x = t(rng.standard_normal((1, cin, 5, 5)))
    w = t(rng.standard_normal((cout, cin, 3, 3)))
    assert check_gradients(lambda ts: ad.conv2d(ts[0], ts[1], padding=1), [x, w], seed=seed) < 1e-6
