"""Mini-batch SGD over shuffled data, plus the Kaczmarz and subspace steps."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cnn_core import TRAINABLE_CNN_FIELDS, cnn_backward, cnn_forward, images_as_maps, init_cnn
from .errors import NonFiniteError
from .mnist_io import Dataset
from .nn_core import MLP_FIELDS, accuracy, cross_entropy_loss, init_mlp, mlp_backward, mlp_forward, mse_loss


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.01
    lr_scaling: str = "per_batch"  # or "per_sample_N"
    seed: int = 0
    epochs: int = 1
    stop_accuracy: float = 0.998
    max_epochs: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.stop_accuracy <= 1:
            raise ValueError("stop_accuracy must lie in (0, 1]")
        if self.lr_scaling not in ("per_batch", "per_sample_N"):
            raise ValueError(f"unknown lr_scaling {self.lr_scaling!r}")

    def step_size(self, n_samples: int) -> float:
        if self.lr_scaling == "per_sample_N":
            return self.learning_rate / n_samples
        return self.learning_rate


@dataclass
class Evaluation:
    probs: np.ndarray
    accuracy: float
    mse_loss: float
    ce_loss: float


@dataclass
class EpochResult:
    params: dict
    epoch: int
    train_accuracy: float | None
    mse_loss: float | None
    ce_loss: float | None
    wall_seconds: float
    evaluation: Evaluation | None = field(default=None, repr=False)


class MlpModel:
    """Adapter giving the dense net the interface the training loops expect."""

    name = "mlp"
    trainable = MLP_FIELDS

    def __init__(self, init_scheme: str = "he", dtype=np.float64):
        self.init_scheme = init_scheme
        self.dtype = dtype

    def init(self, seed: int) -> dict:
        return init_mlp(seed, self.init_scheme, dtype=self.dtype)

    def batch_gradients(self, params, X, Y):
        return mlp_backward(mlp_forward(params, X), Y), {}

    def predict(self, params, inputs, chunk: int = 10000):
        parts = [mlp_forward(params, inputs[:, i:i + chunk]).P for i in range(0, inputs.shape[1], chunk)]
        return np.concatenate(parts, axis=1)


class CnnModel:
    """Adapter for the conv/batch-norm net.

    ``bn_eval_mode`` picks which statistics batch norm uses at prediction time:
    the running averages (``running``) or the statistics of each prediction
    chunk (``batch``).
    """

    name = "cnn"
    trainable = TRAINABLE_CNN_FIELDS

    def __init__(self, bn_eval_mode: str = "running", chunk: int = 1000, dtype=np.float64):
        if bn_eval_mode not in ("running", "batch"):
            raise ValueError(f"unknown bn_eval_mode {bn_eval_mode!r}")
        self.bn_eval_mode = bn_eval_mode
        self.chunk = chunk
        self.dtype = dtype

    def init(self, seed: int) -> dict:
        return init_cnn(seed, dtype=self.dtype)

    def batch_gradients(self, params, X, Y):
        cache = cnn_forward(params, images_as_maps(X), mode="train")
        state = {"run_mean": cache.bn.running_mean, "run_var": cache.bn.running_var}
        return cnn_backward(cache, Y), state

    def predict(self, params, inputs, chunk: int | None = None):
        chunk = chunk or self.chunk
        parts = [
            cnn_forward(params, images_as_maps(inputs[:, i:i + chunk]), mode="eval", bn_stats=self.bn_eval_mode).P
            for i in range(0, inputs.shape[1], chunk)
        ]
        return np.concatenate(parts, axis=1)


def make_model(kind: str, bn_eval_mode: str = "running", init_scheme: str = "he", dtype=np.float64):
    if kind in ("mlp", "dnn"):
        return MlpModel(init_scheme=init_scheme, dtype=dtype)
    if kind == "cnn":
        return CnnModel(bn_eval_mode=bn_eval_mode, dtype=dtype)
    raise ValueError(f"unknown model {kind!r}")


def evaluate(params, dataset: Dataset, model) -> Evaluation:
    P = model.predict(params, dataset.inputs)
    Y = dataset.targets_onehot
    return Evaluation(P, accuracy(P, dataset.labels), mse_loss(P, Y), cross_entropy_loss(P, Y))


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def sgd_epoch(params: dict, dataset: Dataset, config: TrainConfig, model, epoch: int = 1,
              evaluate_after: bool = True) -> EpochResult:
    """One pass over ``dataset`` in shuffled mini-batches; the input params are not modified.

    The last partial batch is kept. Gradients come back already averaged over
    the batch, so the step is ``learning_rate`` (or ``learning_rate / N``).
    """
    if dataset.size == 0:
        raise ValueError("empty dataset")
    start = time.perf_counter()
    params = {k: v.copy() for k, v in params.items()}
    N = dataset.size
    eta = config.step_size(N)
    order = epoch_permutation(config.seed, epoch, N)
    X_all, Y_all = dataset.inputs, dataset.targets_onehot
    for lo in range(0, N, config.batch_size):
        idx = order[lo:lo + config.batch_size]
        grads, state = model.batch_gradients(params, X_all[:, idx], Y_all[:, idx])
        for name, g in grads.items():
            params[name] -= eta * g
        params.update(state)
        for name in grads:
            if not np.all(np.isfinite(params[name])):
                raise NonFiniteError(f"parameter {name} diverged in epoch {epoch}")
    ev = evaluate(params, dataset, model) if evaluate_after else None
    return EpochResult(
        params=params,
        epoch=epoch,
        train_accuracy=ev.accuracy if ev else None,
        mse_loss=ev.mse_loss if ev else None,
        ce_loss=ev.ce_loss if ev else None,
        wall_seconds=time.perf_counter() - start,
        evaluation=ev,
    )


class ZeroGradient(ValueError):
    pass


def kaczmarz_step(residual_value: float, residual_gradient, x):
    """x - g(x) * grad g(x) / |grad g(x)|^2: projection onto g = 0 when g is affine."""
    grad = np.asarray(residual_gradient, dtype=float)
    nrm2 = float(grad.ravel() @ grad.ravel())
    if nrm2 == 0:
        raise ZeroGradient("Kaczmarz step needs a nonzero residual gradient")
    return np.asarray(x, dtype=float) - (residual_value / nrm2) * grad


def cyclic_kaczmarz(A, b, x0=None, sweeps: int = 60, tol: float = 0.0):
    """Sweep the rows of A x = b in order, projecting onto each hyperplane."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.zeros(A.shape[1]) if x0 is None else np.asarray(x0, dtype=float).copy()
    for sweep in range(1, sweeps + 1):
        for a_i, b_i in zip(A, b):
            x = kaczmarz_step(a_i @ x - b_i, a_i, x)
        if tol and np.linalg.norm(A @ x - b) <= tol:
            break
    return x, sweep


def solve_affine_weights(G, reg: float):
    """Minimize w^T G w subject to sum(w) = 1, with G regularized by reg * I.

    Returns w = (G + reg I)^{-1} 1 / (1^T (G + reg I)^{-1} 1). When the
    regularized system is still singular the minimum-norm solution is used.
    """
    G = np.asarray(G, dtype=float)
    m = G.shape[0]
    ones = np.ones(m)
    if not np.any(G) and reg == 0:
        return ones / m
    A = G + reg * np.eye(m)
    try:
        z = np.linalg.solve(A, ones)
        if not np.all(np.isfinite(z)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        z = np.linalg.lstsq(A, ones, rcond=None)[0]
    s = z.sum()
    if s == 0 or not np.isfinite(s):
        return ones / m
    return z / s


def sum_zero_basis(m: int):
    """Orthonormal columns spanning {c : sum(c) = 0}, shape (m, m-1)."""
    _, _, vt = np.linalg.svd(np.ones((1, m)))
    return vt[1:].T


def min_norm_affine_weights(G):
    """Smallest-norm w minimizing w^T G w subject to sum(w) = 1.

    Writes w = 1/m + Q c with Q spanning the sum-zero directions; since the two
    parts are orthogonal, the minimum-norm c of the reduced problem gives the
    minimum-norm w. Degenerate Gram matrices (repeated gradients) therefore
    resolve to the most uniform weights.
    """
    G = np.asarray(G, dtype=float)
    m = G.shape[0]
    w0 = np.full(m, 1.0 / m)
    if m == 1:
        return w0
    Q = sum_zero_basis(m)
    lam, V = np.linalg.eigh(Q.T @ G @ Q)
    # directions G cannot see (relative to its own scale) carry no weight
    keep = lam > 1e-12 * max(np.trace(G), np.finfo(float).tiny)
    rhs = V.T @ (Q.T @ (G @ w0))
    c = V[:, keep] @ (-rhs[keep] / lam[keep])
    return w0 + Q @ c


def subspace_beta_step(x, gradient_list):
    """x - sum_k beta_k g_k with beta minimizing |sum_k beta_k g_k|^2 over sum(beta) = 1.

    Returns ``(x_new, beta)``.
    """
    if len(gradient_list) == 0:
        raise ValueError("need at least one gradient")
    Gs = np.stack([np.asarray(g, dtype=float).ravel() for g in gradient_list])
    G = Gs @ Gs.T
    beta = min_norm_affine_weights(G)
    step = (beta @ Gs).reshape(np.shape(gradient_list[0]))
    return np.asarray(x, dtype=float) - step, beta


@dataclass
class HistoryRow:
    epoch: int
    phase: str  # "sgd" or "anderson"
    train_accuracy: float
    eval_accuracy: float
    mse_loss: float
    ce_loss: float
    wall_seconds: float
    alpha: tuple | None = None


def _row(epoch, phase, params, train_set, eval_set, model, wall, train_eval=None, alpha=None):
    """Score params on the training and evaluation sets; returns (row, eval Evaluation)."""
    t0 = time.perf_counter()
    tr = train_eval if train_eval is not None else evaluate(params, train_set, model)
    ev = tr if eval_set is train_set else evaluate(params, eval_set, model)
    wall += time.perf_counter() - t0
    row = HistoryRow(epoch, phase, tr.accuracy, ev.accuracy, ev.mse_loss, ev.ce_loss, wall,
                     None if alpha is None else tuple(float(a) for a in alpha))
    return row, ev


def train_sgd(params: dict | None, dataset: Dataset, config: TrainConfig, model, eval_dataset: Dataset | None = None,
              epochs: int | None = None, on_epoch=None):
    """Plain SGD for ``epochs`` epochs (default config.epochs) with the stop rule.

    Stops once evaluation accuracy reaches ``config.stop_accuracy`` or the epoch
    count hits ``config.max_epochs``. Returns (params, history).
    """
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    if params is None:
        params = model.init(config.seed)
    epochs = config.epochs if epochs is None else epochs
    history = []
    for epoch in range(1, min(epochs, config.max_epochs) + 1):
        res = sgd_epoch(params, dataset, config, model, epoch)
        params = res.params
        row, _ = _row(epoch, "sgd", params, dataset, eval_dataset, model, res.wall_seconds, res.evaluation)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row, params)
        if row.eval_accuracy >= config.stop_accuracy:
            break
    return params, history
