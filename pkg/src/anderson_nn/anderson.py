"""Restarted Anderson-type acceleration over SGD snapshots.

After every SGD epoch the parameters and the residual P - Y over the evaluation
set are stored. Once ``window`` snapshots are collected, combination weights
alpha with sum(alpha) = 1 are chosen and the parameters are replaced by the
affine combination of the snapshots. Weights come from one of three rules:

``diagonal``
    minimize sum_i |alpha_i r_i|^2, giving alpha_i proportional to 1/|r_i|^2.
``coupled``
    minimize |sum_i alpha_i r_i|^2 through the residual Gram matrix.
``rom``
    minimize the true merit |psi(sum_i alpha_i x_i) - y|^2 of the network
    evaluated at the combined parameters (derivative-free search).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeMismatch
from .mnist_io import Dataset
from .optimizer import TrainConfig, _row, evaluate, sgd_epoch, solve_affine_weights, sum_zero_basis

METHODS = ("diagonal", "coupled", "rom")
NONNEGATIVE_FIELDS = frozenset({"run_var"})


class AlphaNotNormalized(ValueError):
    pass


def flatten_params(params: dict):
    manifest = [(name, a.shape, a.dtype) for name, a in params.items()]
    vec = np.concatenate([a.ravel() for a in params.values()]) if params else np.zeros(0)
    return vec, manifest


def unflatten_params(vec, manifest) -> dict:
    total = sum(math.prod(shape) for _, shape, _ in manifest)
    if total != vec.shape[0]:
        raise SizeMismatch(f"vector of length {vec.shape[0]} does not match manifest ({total})")
    out, pos = {}, 0
    for name, shape, dtype in manifest:
        n = math.prod(shape)
        out[name] = vec[pos:pos + n].reshape(shape).astype(dtype, copy=True)
        pos += n
    return out


@dataclass
class SnapshotBuffer:
    capacity: int = 4
    vectors: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    manifest: list | None = None

    def __len__(self):
        return len(self.vectors)

    def add(self, params: dict, residual):
        vec, manifest = flatten_params(params)
        residual = np.asarray(residual).ravel()
        if self.manifest is None:
            self.manifest = manifest
        elif [(n, s) for n, s, _ in manifest] != [(n, s) for n, s, _ in self.manifest]:
            raise SizeMismatch("snapshot parameters do not match the buffer's layout")
        if self.residuals and residual.shape != self.residuals[0].shape:
            raise SizeMismatch(f"residual length {residual.shape[0]} != {self.residuals[0].shape[0]}")
        if len(self) >= self.capacity:
            raise OverflowError(f"snapshot buffer full ({self.capacity})")
        self.vectors.append(vec)
        self.residuals.append(residual)

    def clear(self):
        self.vectors.clear()
        self.residuals.clear()
        self.manifest = None

    def params(self, i: int) -> dict:
        return unflatten_params(self.vectors[i], self.manifest)


@dataclass
class AlphaSolution:
    alpha: np.ndarray
    objective_value: float
    method: str


def residual_from_probs(P, Y):
    """Vectorize P - Y column by column (class index fastest)."""
    return (P - Y).T.ravel()


def compute_residual(params: dict, eval_dataset: Dataset, model):
    if eval_dataset.size == 0:
        raise ValueError("empty evaluation set")
    return residual_from_probs(model.predict(params, eval_dataset.inputs), eval_dataset.targets_onehot)


def _sq_norms(residuals):
    return np.array([float(r @ r) for r in residuals])


def solve_alpha_diagonal(residuals) -> AlphaSolution:
    norms2 = _sq_norms(residuals)
    m = norms2.shape[0]
    if m == 0:
        raise ValueError("no residuals")
    lam = 1e-12 * norms2.max()
    if lam == 0:
        # every residual is exactly zero
        alpha = np.full(m, 1.0 / m)
    else:
        w = 1.0 / (norms2 + lam)
        alpha = w / w.sum()
    return AlphaSolution(alpha, float(np.sum(alpha ** 2 * norms2)), "diagonal")


def gram_matrix(residuals):
    R = np.stack([np.asarray(r, dtype=float) for r in residuals])
    return R @ R.T


def solve_alpha_coupled(residuals) -> AlphaSolution:
    G = gram_matrix(residuals)
    m = G.shape[0]
    alpha = solve_affine_weights(G, 1e-10 * np.trace(G) / m)
    return AlphaSolution(alpha, float(max(alpha @ G @ alpha, 0.0)), "coupled")


def combine_snapshots(buffer: SnapshotBuffer, alpha) -> dict:
    """sum_i alpha_i x_i over the flattened snapshots, reshaped back to named tensors.

    Running batch-norm variances are clipped at zero since extrapolating weights
    may push them negative.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (len(buffer),):
        raise SizeMismatch(f"{alpha.shape[0] if alpha.ndim else 1} weights for {len(buffer)} snapshots")
    if abs(alpha.sum() - 1.0) > 1e-9:
        raise AlphaNotNormalized(f"weights sum to {alpha.sum()!r}")
    vec = alpha @ np.stack(buffer.vectors)
    params = unflatten_params(vec, buffer.manifest)
    for name in NONNEGATIVE_FIELDS & params.keys():
        np.maximum(params[name], 0, out=params[name])
    return params


def rom_update(buffer: SnapshotBuffer, eval_dataset: Dataset, model, max_evals: int = 100,
               sweeps: int = 3, bracket: float = 1.0):
    """Pick alpha by minimizing the merit of the network at the combined parameters.

    Search runs over alpha = alpha_c + Q c, where alpha_c is the coupled
    Anderson solution and Q spans the sum-zero directions, by golden-section
    line searches along each coordinate of c. Each snapshot and alpha_c are
    always scored, so the returned merit never exceeds any of theirs.

    Returns ``(params, merit, alpha)``.
    """
    m = len(buffer)
    if m == 0:
        raise ValueError("empty snapshot buffer")
    evals = 0

    def merit(alpha):
        nonlocal evals
        evals += 1
        r = compute_residual(combine_snapshots(buffer, alpha), eval_dataset, model)
        return float(r @ r)

    # snapshot merits are the stored residual norms
    best_alpha = np.eye(m)[0]
    best = float(buffer.residuals[0] @ buffer.residuals[0])
    for i in range(1, m):
        v = float(buffer.residuals[i] @ buffer.residuals[i])
        if v < best:
            best, best_alpha = v, np.eye(m)[i]
    if m == 1:
        return buffer.params(0), best, best_alpha

    alpha_c = solve_alpha_coupled(buffer.residuals).alpha
    v = merit(alpha_c)
    if v <= best:
        best, best_alpha = v, alpha_c

    Q = sum_zero_basis(m)
    c = Q.T @ (best_alpha - alpha_c)
    invphi = (math.sqrt(5) - 1) / 2
    n_searches = sweeps * (m - 1)
    done = 0
    for sweep in range(sweeps):
        half = bracket / (2 ** sweep)
        for j in range(m - 1):
            left = max_evals - evals
            per = left // (n_searches - done)
            done += 1
            if per < 2:
                continue

            def f(t):
                cc = c.copy()
                cc[j] = t
                a = alpha_c + Q @ cc
                a = a / a.sum()
                return merit(a), a

            lo, hi = c[j] - half, c[j] + half
            x1, x2 = hi - invphi * (hi - lo), lo + invphi * (hi - lo)
            (f1, a1), (f2, a2) = f(x1), f(x2)
            trail = [(f1, a1, x1), (f2, a2, x2)]
            for _ in range(per - 2):
                if f1 <= f2:
                    hi, x2, f2 = x2, x1, f1
                    x1 = hi - invphi * (hi - lo)
                    f1, a1 = f(x1)
                    trail.append((f1, a1, x1))
                else:
                    lo, x1, f1 = x1, x2, f2
                    x2 = lo + invphi * (hi - lo)
                    f2, a2 = f(x2)
                    trail.append((f2, a2, x2))
            fv, av, tv = min(trail, key=lambda t: t[0])
            if fv < best:
                best, best_alpha = fv, av
                c[j] = tv
    return combine_snapshots(buffer, best_alpha), best, best_alpha


def solve_alpha(method: str, residuals) -> AlphaSolution:
    if method == "diagonal":
        return solve_alpha_diagonal(residuals)
    if method == "coupled":
        return solve_alpha_coupled(residuals)
    raise ValueError(f"unknown alpha method {method!r}")


def restarted_anderson_train(config: TrainConfig, dataset: Dataset, model, method: str = "diagonal",
                             window: int = 4, rounds: int = 1, safeguard: bool = False, params: dict | None = None,
                             eval_dataset: Dataset | None = None, on_event=None):
    """Rounds of ``window`` SGD epochs, each round closed by one Anderson update.

    Residuals are taken on ``eval_dataset`` (the training set when omitted).
    With ``safeguard`` the combined parameters are discarded when their
    residual norm exceeds the last snapshot's. Training stops early once the
    evaluation accuracy reaches ``config.stop_accuracy`` or ``config.max_epochs``
    epochs have run. Returns ``(params, history)``; history rows carry the
    chosen alpha on ``anderson`` rows.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    if params is None:
        params = model.init(config.seed)
    history = []
    buffer = SnapshotBuffer(capacity=window)

    def emit(row, p):
        history.append(row)
        if on_event is not None:
            on_event(row, p)
        return row.eval_accuracy >= config.stop_accuracy

    epoch = 0
    for _ in range(rounds):
        buffer.clear()
        for _ in range(window):
            if epoch >= config.max_epochs:
                return params, history
            epoch += 1
            res = sgd_epoch(params, dataset, config, model, epoch)
            params = res.params
            row, ev = _row(epoch, "sgd", params, dataset, eval_dataset, model, res.wall_seconds, res.evaluation)
            buffer.add(params, residual_from_probs(ev.probs, eval_dataset.targets_onehot))
            if emit(row, params):
                return params, history

        t0 = time.perf_counter()
        if method == "rom":
            combined, _, alpha = rom_update(buffer, eval_dataset, model)
        else:
            alpha = solve_alpha(method, buffer.residuals).alpha
            combined = combine_snapshots(buffer, alpha)
        wall = time.perf_counter() - t0
        row, ev = _row(epoch, "anderson", combined, dataset, eval_dataset, model, wall, alpha=alpha)
        if safeguard:
            r = residual_from_probs(ev.probs, eval_dataset.targets_onehot)
            last = buffer.residuals[-1]
            if r @ r > last @ last:
                combined = params
                row, ev = _row(epoch, "anderson", combined, dataset, eval_dataset, model, wall,
                               alpha=np.eye(len(buffer))[-1])
        params = combined
        if emit(row, params):
            return params, history
    return params, history


__all__ = [
    "AlphaNotNormalized", "AlphaSolution", "SnapshotBuffer", "combine_snapshots", "compute_residual",
    "evaluate", "flatten_params", "restarted_anderson_train", "rom_update", "solve_alpha_coupled",
    "solve_alpha_diagonal", "unflatten_params",
]
