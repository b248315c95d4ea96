"""Dense two-layer network: forward pass, exact backward pass, losses, accuracy.

Activations are stored column-wise: a batch of B inputs is an (n0, B) matrix and
weights are stored (n_out, n_in) so that ``Z = W @ X + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeMismatch, SizeMismatch, check_finite

MLP_SIZES = (784, 128, 10)
MLP_FIELDS = ("W1", "b1", "W2", "b2")


def relu(Z):
    return np.maximum(Z, 0)


def softmax_columns(Z):
    """Column-wise softmax, shifted by the column max before exponentiating."""
    if not np.all(np.isfinite(Z)):
        raise NonFiniteError("softmax input has non-finite entries")
    E = np.exp(Z - Z.max(axis=0, keepdims=True))
    return E / E.sum(axis=0, keepdims=True)


def _same_shape(P, Y):
    if P.shape != Y.shape:
        raise ShapeMismatch(f"{P.shape} vs {Y.shape}")


def mse_loss(P, Y) -> float:
    """(1/2N) * ||P - Y||_F^2 with N the number of columns."""
    _same_shape(P, Y)
    N = P.shape[1]
    return float(np.sum((P - Y) ** 2) / (2 * N))


def cross_entropy_loss(P, Y) -> float:
    _same_shape(P, Y)
    N = P.shape[1]
    labels = np.argmax(Y, axis=0)
    picked = P[labels, np.arange(N)]
    picked = np.maximum(picked, np.finfo(P.dtype).tiny)
    return float(-np.sum(np.log(picked)) / N)


def accuracy(P, labels) -> float:
    """Fraction of columns whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if P.shape[1] != labels.shape[0]:
        raise SizeMismatch(f"{P.shape[1]} predictions for {labels.shape[0]} labels")
    if labels.shape[0] == 0:
        raise SizeMismatch("accuracy of an empty set")
    return float(np.mean(np.argmax(P, axis=0) == labels))


def init_mlp(seed: int = 0, scheme: str = "he", sizes=MLP_SIZES, dtype=np.float64) -> dict:
    """Random weights, zero biases.

    ``he`` draws N(0, 2/fan_in); ``uniform01`` draws U(0, 1) entries.
    """
    n0, n1, n2 = sizes
    rng = np.random.default_rng(seed)
    if scheme == "he":
        W1 = rng.normal(0.0, np.sqrt(2.0 / n0), size=(n1, n0))
        W2 = rng.normal(0.0, np.sqrt(2.0 / n1), size=(n2, n1))
    elif scheme == "uniform01":
        W1 = rng.random((n1, n0))
        W2 = rng.random((n2, n1))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return {
        "W1": W1.astype(dtype),
        "b1": np.zeros(n1, dtype=dtype),
        "W2": W2.astype(dtype),
        "b2": np.zeros(n2, dtype=dtype),
    }


@dataclass
class ForwardCache:
    X0: np.ndarray
    Z1: np.ndarray
    X1: np.ndarray
    Z2: np.ndarray
    P: np.ndarray
    W2: np.ndarray  # kept for the backward pass


def mlp_forward(params: dict, X) -> ForwardCache:
    W1, b1, W2, b2 = (params[k] for k in MLP_FIELDS)
    if X.ndim != 2 or X.shape[0] != W1.shape[1] or X.shape[1] < 1:
        raise ShapeMismatch(f"input {X.shape} does not fit W1 {W1.shape}")
    Z1 = W1 @ X + b1[:, None]
    X1 = relu(Z1)
    Z2 = W2 @ X1 + b2[:, None]
    P = softmax_columns(Z2)
    return ForwardCache(X0=X, Z1=Z1, X1=X1, Z2=Z2, P=P, W2=W2)


def mlp_backward(cache: ForwardCache, Ybar) -> dict:
    """Gradients of the batch-averaged softmax cross-entropy.

    The output error is P - Ybar; hidden errors are masked by Z1 > 0, and every
    gradient carries the 1/B average.
    """
    if Ybar.shape != cache.P.shape:
        raise ShapeMismatch(f"targets {Ybar.shape} vs predictions {cache.P.shape}")
    B = Ybar.shape[1]
    D2 = cache.P - Ybar
    D1 = (cache.W2.T @ D2) * (cache.Z1 > 0)
    grads = {
        "W1": D1 @ cache.X0.T / B,
        "b1": D1.sum(axis=1) / B,
        "W2": D2 @ cache.X1.T / B,
        "b2": D2.sum(axis=1) / B,
    }
    check_finite("MLP gradients", *grads.values())
    return grads
