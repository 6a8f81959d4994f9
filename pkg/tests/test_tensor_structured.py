import numpy as np
import pytest

from flowvos import tensor as T
from flowvos.errors import ShapeError

from .oracles import finite_difference, rel_err, scalar_conv2d

RNG = np.random.default_rng(7)


def _check_fd(build, leaves, h=1e-3, tol=1e-3):
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(build())
    fd = finite_difference(lambda: build().item(), [t.data for t in leaves], h=h)
    for leaf, ref in zip(leaves, fd):
        assert rel_err(leaf.grad, ref) <= tol


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1)])
def test_conv2d_matches_scalar_loop(stride, padding):
    x = RNG.standard_normal((3, 6, 7)).astype(np.float32)
    w = RNG.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = RNG.standard_normal(4).astype(np.float32)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding)
    ref = scalar_conv2d(x, w, b, stride, padding)
    assert out.data.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) <= 1e-5


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_gradients():
    x = T.Tensor(RNG.standard_normal((2, 5, 5)).astype(np.float64), requires_grad=True)
    w = T.Tensor(RNG.standard_normal((3, 2, 3, 3)).astype(np.float64) * 0.5, requires_grad=True)
    b = T.Tensor(RNG.standard_normal(3).astype(np.float64), requires_grad=True)
    _check_fd(lambda: T.tsum(T.tanh(T.conv2d(x, w, b, stride=2, padding=1))), [x, w, b])


def test_conv2d_gradients_no_bias():
    x = T.Tensor(RNG.standard_normal((1, 4, 4)).astype(np.float64), requires_grad=True)
    w = T.Tensor(RNG.standard_normal((2, 1, 3, 3)).astype(np.float64) * 0.5, requires_grad=True)
    _check_fd(lambda: T.tsum(T.tanh(T.conv2d(x, w, stride=1, padding=1))), [x, w])


def test_upsample_constant_stays_constant():
    x = T.Tensor(np.full((2, 3, 4), 1.5, dtype=np.float32))
    out = T.upsample_bilinear(x, 2)
    assert out.shape == (2, 6, 8)
    np.testing.assert_array_equal(out.data, np.full((2, 6, 8), 1.5, dtype=np.float32))


def test_upsample_preserves_mean():
    x = T.Tensor(RNG.standard_normal((1, 4, 4)).astype(np.float32))
    out = T.upsample_bilinear(x, 2)
    # half-pixel sampling reproduces original samples at aligned positions
    assert abs(out.data.mean() - x.data.mean()) < 0.2


def test_upsample_gradients():
    x = T.Tensor(RNG.standard_normal((2, 3, 3)).astype(np.float64), requires_grad=True)
    _check_fd(lambda: T.tsum(T.tanh(T.upsample_bilinear(x, 2))), [x])


def test_group_norm_statistics():
    x = RNG.standard_normal((8, 5, 5)).astype(np.float32) * 3 + 1
    out = T.group_norm(T.Tensor(x), 4, T.Tensor(np.ones(8, dtype=np.float32)), T.Tensor(np.zeros(8, dtype=np.float32)))
    g = out.data.reshape(4, -1)
    np.testing.assert_allclose(g.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(g.std(axis=1), 1.0, atol=1e-3)


def test_group_norm_gradients():
    x = T.Tensor(RNG.standard_normal((4, 3, 3)).astype(np.float64), requires_grad=True)
    gamma = T.Tensor((RNG.standard_normal(4) * 0.3 + 1).astype(np.float64), requires_grad=True)
    beta = T.Tensor(RNG.standard_normal(4).astype(np.float64) * 0.1, requires_grad=True)
    _check_fd(lambda: T.tsum(T.tanh(T.group_norm(x, 2, gamma, beta))), [x, gamma, beta], tol=2e-3)


def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((16, 4, 4), dtype=np.float32))
    labels = RNG.integers(0, 16, size=(4, 4))
    loss = T.cross_entropy(logits, labels)
    assert loss.item() == pytest.approx(np.log(16.0), abs=1e-6)


def test_cross_entropy_gradients():
    logits = T.Tensor(RNG.standard_normal((5, 3, 3)).astype(np.float64), requires_grad=True)
    labels = RNG.integers(0, 5, size=(3, 3))
    _check_fd(lambda: T.cross_entropy(logits, labels), [logits])
