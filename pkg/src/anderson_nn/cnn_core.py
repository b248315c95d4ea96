"""Convolution, batch normalization, max pooling and the small CNN built from them.

Public layer functions take feature maps laid out (H, W, C, B) and kernels laid
out (k, k, C_in, C_out). Internally everything runs batch-first (B, H, W, C) so
the convolution becomes one matrix product over im2col patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, check_finite
from .nn_core import softmax_columns

CNN_FIELDS = ("K", "b_conv", "gamma", "beta", "run_mean", "run_var", "W_fc", "b_fc")
TRAINABLE_CNN_FIELDS = ("K", "b_conv", "gamma", "beta", "W_fc", "b_fc")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class EmptyOutput(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


def _to_nhwc(X):
    return X.transpose(3, 0, 1, 2)


def _to_hwcb(X):
    return X.transpose(1, 2, 3, 0)


# ---------------------------------------------------------------- convolution

@dataclass
class ConvLayerCache:
    x_shape: tuple  # (B, H, W, C_in)
    cols: np.ndarray  # (B, Ho, Wo, C_in*k*k), patch order (c, i, j)
    Kmat: np.ndarray  # (C_in*k*k, C_out)
    k: int
    stride: int
    pad: int


def _out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv_nhwc(X, K, bias, stride, pad):
    B, H, W, C = X.shape
    k, k2, C_in, C_out = K.shape
    if k != k2 or C_in != C:
        raise ShapeMismatch(f"kernel {K.shape} does not fit input with {C} channels")
    if bias.shape != (C_out,):
        raise ShapeMismatch(f"bias {bias.shape}, expected ({C_out},)")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    Ho, Wo = _out_dim(H, k, stride, pad), _out_dim(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise EmptyOutput(f"{H}x{W} input, kernel {k}, pad {pad}, stride {stride}")
    Xp = np.pad(X, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else X
    win = sliding_window_view(Xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.reshape(B, Ho, Wo, C * k * k)
    Kmat = K.transpose(2, 0, 1, 3).reshape(C * k * k, C_out)
    out = cols @ Kmat + bias
    return out, ConvLayerCache(X.shape, cols, Kmat, k, stride, pad)


def _conv_backward_nhwc(cache: ConvLayerCache, G, need_dx: bool = True):
    B, H, W, C = cache.x_shape
    k, s, p = cache.k, cache.stride, cache.pad
    _, Ho, Wo, _ = cache.cols.shape
    C_out = cache.Kmat.shape[1]
    if G.shape != (B, Ho, Wo, C_out):
        raise ShapeMismatch(f"upstream gradient {G.shape}, expected {(B, Ho, Wo, C_out)}")
    G2 = G.reshape(-1, C_out)
    dKmat = cache.cols.reshape(-1, C * k * k).T @ G2
    dK = dKmat.reshape(C, k, k, C_out).transpose(1, 2, 0, 3)
    dbias = G2.sum(axis=0)
    if not need_dx:
        return None, dK, dbias
    dcols = (G @ cache.Kmat.T).reshape(B, Ho, Wo, C, k, k)
    dXp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=G.dtype)
    for i in range(k):
        for j in range(k):
            dXp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += dcols[..., i, j]
    dX = dXp[:, p:p + H, p:p + W, :]
    return dX, dK, dbias


def conv2d_forward(X, K, bias, stride: int = 1, pad: int = 1):
    """Zero-padded cross-correlation of X (H, W, C_in, B) with K (k, k, C_in, C_out).

    Returns ``(out, cache)`` with ``out`` laid out (Ho, Wo, C_out, B).
    """
    out, cache = _conv_nhwc(_to_nhwc(X), K, bias, stride, pad)
    return _to_hwcb(out), cache


def conv2d_backward(cache: ConvLayerCache, dOut):
    """Returns (dX, dK, dBias); dX is the adjoint convolution applied to dOut."""
    dX, dK, dbias = _conv_backward_nhwc(cache, _to_nhwc(dOut))
    return _to_hwcb(dX), dK, dbias


# ---------------------------------------------------------- batch normalization

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


def _bn_nhwc(X, gamma, beta, running_mean, running_var, mode, eps, momentum, stats):
    axes = tuple(range(X.ndim - 1))
    m = X.size // X.shape[-1]
    new_mean, new_var = running_mean, running_var
    if mode == "train" or stats == "batch":
        if m < 2:
            raise BatchTooSmall(f"{m} values per channel; batch statistics need at least 2")
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
        if mode == "train" and running_mean is not None:
            new_mean = (1 - momentum) * running_mean + momentum * mu
            new_var = (1 - momentum) * running_var + momentum * var * (m / (m - 1))
    elif mode == "eval":
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv_std
    Y = gamma * xhat + beta
    return Y, BatchNormCache(xhat, inv_std, gamma, mode, new_mean, new_var)


def _bn_backward_nhwc(cache: BatchNormCache, dY):
    if dY.shape != cache.xhat.shape:
        raise ShapeMismatch(f"{dY.shape} vs {cache.xhat.shape}")
    axes = tuple(range(dY.ndim - 1))
    m = dY.size // dY.shape[-1]
    dbeta = dY.sum(axis=axes)
    dgamma = (dY * cache.xhat).sum(axis=axes)
    dxhat = dY * cache.gamma
    dX = (cache.inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - cache.xhat * (dxhat * cache.xhat).sum(axis=axes))
    return dX, dgamma, dbeta


def batchnorm_forward(X, gamma, beta, running_mean=None, running_var=None, mode: str = "train",
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM, stats: str = "running"):
    """Spatial batch norm of X (H, W, C, B): statistics per channel over H, W and B.

    In train mode the batch statistics are used and the updated running
    statistics are returned on the cache. In eval mode the running statistics
    are used, unless ``stats="batch"``.
    """
    Y, cache = _bn_nhwc(_to_nhwc(X), gamma, beta, running_mean, running_var, mode, eps, momentum, stats)
    return _to_hwcb(Y), cache


def batchnorm_backward(cache: BatchNormCache, dY):
    dX, dgamma, dbeta = _bn_backward_nhwc(cache, _to_nhwc(dY))
    return _to_hwcb(dX), dgamma, dbeta


# ---------------------------------------------------------------- max pooling

@dataclass
class PoolCache:
    x_shape: tuple  # (B, H, W, C)
    argmax: np.ndarray  # (B, Ho, Wo, C), flat index inside the window, row-major
    window: int
    stride: int


def maxpool_forward(X, window: int = 2, stride: int = 2):
    """Per-window maximum of X (H, W, C, B); ties go to the first element in row-major order."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    Xn = _to_nhwc(X)
    B, H, W, C = Xn.shape
    Ho, Wo = _out_dim(H, window, stride, 0), _out_dim(W, window, stride, 0)
    if Ho < 1 or Wo < 1:
        raise EmptyOutput(f"{H}x{W} input with window {window}")
    win = sliding_window_view(Xn, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    flat = win.reshape(B, Ho, Wo, C, window * window)
    idx = flat.argmax(axis=-1)
    Y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return _to_hwcb(Y), PoolCache(Xn.shape, idx, window, stride)


def maxpool_backward(cache: PoolCache, dY):
    G = _to_nhwc(dY)
    if G.shape != cache.argmax.shape:
        raise ShapeMismatch(f"{G.shape} vs {cache.argmax.shape}")
    B, H, W, C = cache.x_shape
    _, Ho, Wo, _ = G.shape
    w, s = cache.window, cache.stride
    dX = np.zeros((B, H, W, C), dtype=G.dtype)
    for i in range(w):
        for j in range(w):
            hit = cache.argmax == i * w + j
            dX[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += np.where(hit, G, 0)
    return _to_hwcb(dX)


# ------------------------------------------------------------------ the CNN

def init_cnn(seed: int = 0, n_filters: int = 8, n_classes: int = 10, image_size: int = 28,
             k: int = 3, dtype=np.float64) -> dict:
    """He-initialized kernel and FC weights; gamma=1, beta=0, zero biases."""
    rng = np.random.default_rng(seed)
    n_flat = image_size * image_size * n_filters
    K = rng.normal(0.0, np.sqrt(2.0 / (k * k)), size=(k, k, 1, n_filters))
    W_fc = rng.normal(0.0, np.sqrt(2.0 / n_flat), size=(n_classes, n_flat))
    return {
        "K": K.astype(dtype),
        "b_conv": np.zeros(n_filters, dtype=dtype),
        "gamma": np.ones(n_filters, dtype=dtype),
        "beta": np.zeros(n_filters, dtype=dtype),
        "run_mean": np.zeros(n_filters, dtype=dtype),
        "run_var": np.ones(n_filters, dtype=dtype),
        "W_fc": W_fc.astype(dtype),
        "b_fc": np.zeros(n_classes, dtype=dtype),
    }


@dataclass
class ConvCache:
    X: np.ndarray  # (B, H, W, 1)
    conv: ConvLayerCache
    bn: BatchNormCache
    pre_bn: np.ndarray
    post_relu: np.ndarray
    flat: np.ndarray  # (6272, B)
    logits: np.ndarray
    P: np.ndarray
    W_fc: np.ndarray
    mode: str
    extras: dict = field(default_factory=dict)


def images_as_maps(inputs, image_size: int = 28):
    """(784, B) column matrix -> (28, 28, 1, B) feature maps, row-major pixels."""
    return inputs.reshape(image_size, image_size, 1, inputs.shape[1])


def cnn_forward(params: dict, X, mode: str = "train", bn_stats: str = "running") -> ConvCache:
    """conv 3x3 (pad 1) -> batch norm -> ReLU -> flatten -> FC -> softmax.

    X is (H, W, 1, B). Flattening is row-major over (H, W, C) per sample.
    """
    Xn = _to_nhwc(X)
    B = Xn.shape[0]
    pre_bn, conv_cache = _conv_nhwc(Xn, params["K"], params["b_conv"], 1, 1)
    bn_out, bn_cache = _bn_nhwc(pre_bn, params["gamma"], params["beta"], params["run_mean"],
                                params["run_var"], mode, BN_EPS, BN_MOMENTUM, bn_stats)
    A = np.maximum(bn_out, 0)
    flat = A.reshape(B, -1).T
    W_fc = params["W_fc"]
    if flat.shape[0] != W_fc.shape[1]:
        raise ShapeMismatch(f"flattened size {flat.shape[0]} does not fit W_fc {W_fc.shape}")
    logits = W_fc @ flat + params["b_fc"][:, None]
    P = softmax_columns(logits)
    return ConvCache(Xn, conv_cache, bn_cache, pre_bn, A, flat, logits, P, W_fc, mode)


def cnn_backward(cache: ConvCache, Ybar) -> dict:
    """Gradients of batch-averaged softmax cross-entropy for every trainable field."""
    if Ybar.shape != cache.P.shape:
        raise ShapeMismatch(f"targets {Ybar.shape} vs predictions {cache.P.shape}")
    if cache.mode != "train":
        raise ValueError("cnn_backward needs a train-mode cache")
    B = Ybar.shape[1]
    D = (cache.P - Ybar) / B
    g_W_fc = D @ cache.flat.T
    g_b_fc = D.sum(axis=1)
    dA = (cache.W_fc.T @ D).T.reshape(cache.post_relu.shape)
    dA *= cache.post_relu > 0
    d_pre, g_gamma, g_beta = _bn_backward_nhwc(cache.bn, dA)
    _, g_K, g_b_conv = _conv_backward_nhwc(cache.conv, d_pre, need_dx=False)
    grads = {"K": g_K, "b_conv": g_b_conv, "gamma": g_gamma, "beta": g_beta, "W_fc": g_W_fc, "b_fc": g_b_fc}
    check_finite("CNN gradients", *grads.values())
    return grads
