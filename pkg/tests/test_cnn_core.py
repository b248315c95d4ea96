import numpy as np
import pytest

from anderson_nn.cnn_core import (TRAINABLE_CNN_FIELDS, BatchTooSmall, EmptyOutput, batchnorm_backward,
                                  batchnorm_forward, cnn_backward, cnn_forward, conv2d_backward, conv2d_forward,
                                  images_as_maps, init_cnn, maxpool_backward, maxpool_forward)
from anderson_nn.errors import ShapeMismatch
from anderson_nn.mnist_io import one_hot
from anderson_nn.nn_core import cross_entropy_loss
from oracles import max_rel_error, naive_conv, numeric_grad

rng = np.random.default_rng(1234)


# ---------------------------------------------------------------- convolution

def test_identity_kernel():
    X = rng.normal(size=(5, 4, 1, 3))
    out, _ = conv2d_forward(X, np.ones((1, 1, 1, 1)), np.zeros(1), stride=1, pad=0)
    np.testing.assert_array_equal(out, X)


def test_all_ones_kernel_on_constant_image():
    v = 2.5
    X = np.full((6, 6, 1, 1), v)
    out, _ = conv2d_forward(X, np.ones((3, 3, 1, 1)), np.zeros(1), stride=1, pad=1)
    out = out[:, :, 0, 0]
    assert out.shape == (6, 6)
    # zero padding leaves 4 of 9 window cells inside at a corner, 6 along an edge
    assert np.all(out[1:-1, 1:-1] == 9 * v)
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4 * v
    assert np.all(out[0, 1:-1] == 6 * v)


def test_zero_input_gives_bias():
    K = rng.normal(size=(3, 3, 2, 4))
    bias = np.array([1.0, -2.0, 0.5, 3.0])
    out, _ = conv2d_forward(np.zeros((7, 7, 2, 2)), K, bias)
    assert out.shape == (7, 7, 4, 2)
    for o in range(4):
        assert np.all(out[:, :, o] == bias[o])


def test_conv_errors():
    with pytest.raises(ShapeMismatch):
        conv2d_forward(np.zeros((5, 5, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))
    with pytest.raises(EmptyOutput):
        conv2d_forward(np.zeros((2, 2, 1, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1), pad=0)


def random_conv_case(r):
    H, W = r.integers(3, 9, size=2)
    C, Co, B = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
    k = int(r.choice([1, 2, 3]))
    stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
    if min(H, W) + 2 * pad < k:
        pad = 1
    # small integers keep every sum exact in float64
    X = r.integers(-5, 6, size=(H, W, C, B)).astype(float)
    K = r.integers(-3, 4, size=(k, k, C, Co)).astype(float)
    bias = r.integers(-2, 3, size=Co).astype(float)
    return X, K, bias, stride, pad


def test_conv_equals_naive_loops_exactly():
    r = np.random.default_rng(50)
    for _ in range(50):
        X, K, bias, stride, pad = random_conv_case(r)
        out, _ = conv2d_forward(X, K, bias, stride, pad)
        np.testing.assert_array_equal(out, naive_conv(X, K, bias, stride, pad))


def test_conv_adjoint_identity():
    r = np.random.default_rng(51)
    for _ in range(20):
        X, K, _, stride, pad = random_conv_case(r)
        X = r.normal(size=X.shape)
        K = r.normal(size=K.shape)
        out, cache = conv2d_forward(X, K, np.zeros(K.shape[3]), stride, pad)
        U = r.normal(size=out.shape)
        dX, _, _ = conv2d_backward(cache, U)
        assert abs(np.vdot(out, U) - np.vdot(X, dX)) < 1e-10


def test_conv_backward_zero_upstream():
    X = rng.normal(size=(5, 5, 1, 2))
    out, cache = conv2d_forward(X, rng.normal(size=(3, 3, 1, 2)), np.zeros(2))
    dX, dK, db = conv2d_backward(cache, np.zeros_like(out))
    assert not dX.any() and not dK.any() and not db.any()


def test_conv_backward_finite_differences():
    r = np.random.default_rng(5)
    X = r.normal(size=(5, 5, 1, 2))
    p = {"X": X, "K": r.normal(size=(3, 3, 1, 2)), "b": r.normal(size=2)}
    R = r.normal(size=(5, 5, 2, 2))

    def loss(q):
        return float(np.sum(conv2d_forward(q["X"], q["K"], q["b"], 1, 1)[0] * R))

    _, cache = conv2d_forward(p["X"], p["K"], p["b"], 1, 1)
    dX, dK, db = conv2d_backward(cache, R)
    numeric = numeric_grad(loss, p)
    assert max_rel_error({"X": dX, "K": dK, "b": db}, numeric) < 1e-6


# ---------------------------------------------------------- batch normalization

def test_batchnorm_constant_batch():
    X = np.full((3, 3, 2, 4), 7.0)
    beta = np.array([0.3, -1.0])
    Y, cache = batchnorm_forward(X, np.array([2.0, 5.0]), beta)
    assert not cache.xhat.any()
    assert np.all(Y[:, :, 0] == beta[0]) and np.all(Y[:, :, 1] == beta[1])


def test_batchnorm_standardizes():
    X = rng.normal(3.0, 2.0, size=(4, 4, 3, 8))
    Y, _ = batchnorm_forward(X, np.ones(3), np.zeros(3))
    for c in range(3):
        assert abs(Y[:, :, c].mean()) < 1e-10
        # eps = 1e-5 shrinks the variance by var / (var + eps)
        assert abs(Y[:, :, c].var() - 1) < 1e-5


def test_batchnorm_affine():
    X = rng.normal(size=(2, 2, 1, 3))
    _, cache = batchnorm_forward(X, np.ones(1), np.zeros(1))
    Y, _ = batchnorm_forward(X, np.array([2.0]), np.array([3.0]))
    np.testing.assert_allclose(Y, 2 * cache.xhat.transpose(1, 2, 3, 0) + 3, rtol=0, atol=1e-15)


def test_batchnorm_running_and_eval():
    X = rng.normal(1.0, 3.0, size=(2, 2, 1, 5))
    _, cache = batchnorm_forward(X, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))
    m = 20
    np.testing.assert_allclose(cache.running_mean, 0.1 * X.mean())
    np.testing.assert_allclose(cache.running_var, 0.9 + 0.1 * X.var() * m / (m - 1))
    Y, _ = batchnorm_forward(X, np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]), mode="eval")
    np.testing.assert_allclose(Y, (X - 1.0) / np.sqrt(4.0 + 1e-5))


def test_batchnorm_too_small():
    with pytest.raises(BatchTooSmall):
        batchnorm_forward(np.ones((1, 1, 1, 1)), np.ones(1), np.zeros(1))


def test_batchnorm_backward_zero_and_dbeta():
    X = rng.normal(size=(2, 2, 2, 3))
    _, cache = batchnorm_forward(X, np.ones(2), np.zeros(2))
    dX, dg, db = batchnorm_backward(cache, np.zeros_like(X))
    assert not dX.any() and not dg.any() and not db.any()
    dY = rng.normal(size=X.shape)
    _, _, db = batchnorm_backward(cache, dY)
    np.testing.assert_array_equal(db, dY.sum(axis=(0, 1, 3)))


def test_batchnorm_backward_finite_differences():
    r = np.random.default_rng(8)
    p = {"X": r.normal(size=(2, 2, 1, 2)), "gamma": np.array([1.7]), "beta": np.array([-0.4])}
    R = r.normal(size=(2, 2, 1, 2))

    def loss(q):
        return float(np.sum(batchnorm_forward(q["X"], q["gamma"], q["beta"])[0] * R))

    _, cache = batchnorm_forward(p["X"], p["gamma"], p["beta"])
    dX, dg, db = batchnorm_backward(cache, R)
    assert max_rel_error({"X": dX, "gamma": dg, "beta": db}, numeric_grad(loss, p)) < 1e-6


# ---------------------------------------------------------------- max pooling

def maps(a):
    return np.asarray(a, dtype=float)[:, :, None, None]


def test_maxpool_basic():
    Y, cache = maxpool_forward(maps([[1, 2], [3, 4]]))
    assert Y.shape == (1, 1, 1, 1) and Y[0, 0, 0, 0] == 4
    dX = maxpool_backward(cache, np.ones_like(Y))
    np.testing.assert_array_equal(dX[:, :, 0, 0], [[0, 0], [0, 1]])


def test_maxpool_ties_take_first():
    Y, cache = maxpool_forward(maps(np.full((4, 4), 3.0)))
    assert np.all(Y == 3) and np.all(cache.argmax == 0)


def test_maxpool_ramp_matches_window_scan():
    X = np.arange(16.0).reshape(4, 4)
    Y, _ = maxpool_forward(maps(X))
    expect = np.array([[max(X[i:i + 2, j:j + 2].ravel()) for j in (0, 2)] for i in (0, 2)])
    np.testing.assert_array_equal(Y[:, :, 0, 0], expect)


def test_maxpool_backward_sum_adjoint_and_fd():
    r = np.random.default_rng(9)
    X = r.normal(size=(6, 6, 2, 3))
    Y, cache = maxpool_forward(X)
    U = r.normal(size=Y.shape)
    dX = maxpool_backward(cache, U)
    assert abs(dX.sum() - U.sum()) < 1e-12
    # pooling is linear on the fixed argmax pattern, so <pool(X), U> = <X, dX>
    assert abs(np.vdot(Y, U) - np.vdot(X, dX)) < 1e-10

    numeric = numeric_grad(lambda q: float(np.sum(maxpool_forward(q["X"])[0] * U)), {"X": X.copy()})
    assert max_rel_error({"X": dX}, numeric) < 1e-6


def test_maxpool_errors():
    with pytest.raises(EmptyOutput):
        maxpool_forward(maps([[1.0]]), window=2)
    _, cache = maxpool_forward(maps(np.ones((4, 4))))
    with pytest.raises(ShapeMismatch):
        maxpool_backward(cache, np.ones((1, 1, 1, 1)))


# ------------------------------------------------------------------ the CNN

def test_cnn_shapes_and_uniform_output():
    params = init_cnn(0)
    assert params["K"].shape == (3, 3, 1, 8) and params["W_fc"].shape == (10, 6272)
    X = images_as_maps(rng.random((784, 3)))
    cache = cnn_forward(params, X)
    assert cache.flat.shape == (6272, 3)
    assert np.all(np.abs(cache.P.sum(axis=0) - 1) < 1e-12)
    zero = dict(params, K=np.zeros_like(params["K"]), W_fc=np.zeros_like(params["W_fc"]))
    np.testing.assert_array_equal(cnn_forward(zero, X).P, np.full((10, 3), 0.1))


def test_cnn_eval_deterministic():
    params = init_cnn(1)
    X = images_as_maps(rng.random((784, 4)))
    a = cnn_forward(params, X, mode="eval").P
    b = cnn_forward(params, X, mode="eval").P
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        cnn_backward(cnn_forward(params, X, mode="eval"), one_hot([0, 1, 2, 3]))


def toy_cnn(seed=3):
    r = np.random.default_rng(seed)
    params = init_cnn(seed, n_filters=2, n_classes=2, image_size=6)
    params["gamma"] = r.uniform(0.5, 1.5, 2)
    params["beta"] = r.normal(size=2) * 0.3
    params["b_conv"] = r.normal(size=2) * 0.1
    params["W_fc"] = r.normal(size=(2, 72)) * 0.3
    X = r.random((6, 6, 1, 4))
    Y = one_hot([0, 1, 1, 0], 2)
    return params, X, Y


def test_cnn_backward_zero_when_exact():
    params, X, _ = toy_cnn()
    cache = cnn_forward(params, X)
    grads = cnn_backward(cache, cache.P.copy())
    assert all(np.max(np.abs(g)) < 1e-15 for g in grads.values())


def test_cnn_full_stack_finite_differences():
    params, X, Y = toy_cnn()
    grads = cnn_backward(cnn_forward(params, X), Y)
    trainable = {k: params[k] for k in TRAINABLE_CNN_FIELDS}

    def loss(q):
        return cross_entropy_loss(cnn_forward({**params, **q}, X).P, Y)

    assert max_rel_error(grads, numeric_grad(loss, trainable)) < 1e-5


def test_cnn_dgamma_algebraic():
    params, X, Y = toy_cnn(4)
    cache = cnn_forward(params, X)
    grads = cnn_backward(cache, Y)
    B = X.shape[3]
    dA = ((params["W_fc"].T @ (cache.P - Y)) / B).T.reshape(cache.post_relu.shape) * (cache.post_relu > 0)
    for c in range(2):
        assert grads["gamma"][c] == pytest.approx(np.sum(dA[..., c] * cache.bn.xhat[..., c]), rel=1e-12)
