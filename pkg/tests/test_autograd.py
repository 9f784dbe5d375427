import numpy as np
import pytest

from kpmotion.autograd import (Tensor, concat, depthwise_conv1d, euler_to_rowmatrix, gather_bias,
                               layer_norm, no_grad, stack)
from kpmotion.kpspace import euler_to_matrix
from kpmotion.losses import grad_check


def _proj(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


@pytest.mark.parametrize("op", ["tanh", "exp", "sin", "cos", "sigmoid", "silu"])
def test_unary_ops(op):
    x = np.random.default_rng(1).normal(size=(3, 4))
    fn = lambda t: (getattr(t, op)() * _proj((3, 4))).sum()  # noqa: E731
    assert grad_check(fn, [x]) <= 1e-6


def test_log_sqrt_pow_div():
    x = np.random.default_rng(2).uniform(0.5, 2.0, (5,))
    fn = lambda t: (t.log() + t.sqrt() + t ** 3 + 1.0 / t + t / 2.0).sum()  # noqa: E731
    assert grad_check(fn, [x]) <= 1e-6


def test_broadcasting_matmul_and_reductions():
    rng = np.random.default_rng(3)
    a, b, c = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))

    def fn(x, y, z):
        h = (x @ y + z).mean(axis=1, keepdims=True) - (x @ y).sum(axis=-1, keepdims=True)
        return (h * h).sum()

    assert grad_check(fn, [a, b, c]) <= 1e-6


def test_reshape_transpose_index_softmax():
    x = np.random.default_rng(4).normal(size=(2, 3, 4))

    def fn(t):
        y = t.transpose(0, 2, 1).reshape(2, 12).softmax(-1)
        return (y[:, 1:7] * _proj((2, 6))).sum() + t[0, 1].sum() + t.swapaxes(0, 1)[2, 1, 3]

    assert grad_check(fn, [x]) <= 1e-6


def test_concat_stack():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

    def fn(x, y):
        return (concat([x, y], -1) * _proj((2, 6))).sum() + (stack([x, y]) ** 2).sum()

    assert grad_check(fn, [a, b]) <= 1e-6


def test_layer_norm_and_conv():
    rng = np.random.default_rng(6)
    x, g, b = rng.normal(size=(2, 7, 4)), rng.normal(size=4), rng.normal(size=4)
    w, cb = rng.normal(size=(3, 4)), rng.normal(size=4)

    def fn(x, g, b, w, cb):
        return (depthwise_conv1d(layer_norm(x, g, b), w, cb) * _proj((2, 7, 4))).sum()

    assert grad_check(fn, [x, g, b, w, cb]) <= 1e-5


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(1, 6, 2)), rng.normal(size=(3, 2)), rng.normal(size=2)
    out = depthwise_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    for t in range(6):
        assert np.allclose(out[0, t], b + sum(xp[0, t + j] * w[j] for j in range(3)))


def test_gather_bias_gradient():
    rng = np.random.default_rng(8)
    T, R = 5, 2
    off = np.arange(T)[None] - np.arange(T)[:, None]
    valid = np.abs(off) <= R
    index = np.where(valid, off + R, 0)
    tab = rng.normal(size=(2, 2 * R + 1))
    fn = lambda t: (gather_bias(t, index, valid) * _proj((2, T, T))).sum()  # noqa: E731
    assert grad_check(fn, [tab]) <= 1e-6


def test_euler_rowmatrix_matches_numpy_and_gradient():
    a = np.random.default_rng(9).normal(size=(4, 3))
    R = euler_to_rowmatrix(Tensor(a)).data
    assert np.array_equal(R, euler_to_matrix(a[:, 0], a[:, 1], a[:, 2]))
    fn = lambda t: (euler_to_rowmatrix(t) * _proj((4, 3, 3))).sum()  # noqa: E731
    assert grad_check(fn, [a]) <= 1e-6


def test_shared_node_gradients_accumulate():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    (y * y).sum().backward()
    # d/dx (x^2 + x)^2 = 2 (x^2 + x)(2x + 1)
    assert x.grad[0] == pytest.approx(2 * 6 * 5)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()
