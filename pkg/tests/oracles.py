"""Independent reference computations used by the tests."""

import numpy as np


def numeric_grad(f, params: dict, step: float = 1e-5) -> dict:
    """Central differences of scalar f(params) for every coordinate of every tensor."""
    out = {}
    for name, a in params.items():
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            fp = f(params)
            a[i] = old - step
            fm = f(params)
            a[i] = old
            g[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def max_rel_error(analytic: dict, numeric: dict, significant: float = 1e-7, abs_tol: float = 1e-9):
    """Largest |a - n| / max(|a|, |n|) over coordinates where the gradient is significant.

    Coordinates where both values are below ``significant`` carry no relative
    information (e.g. a bias whose effect batch norm cancels); those must agree
    absolutely within ``abs_tol`` instead, otherwise the error is reported as inf.
    """
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name], dtype=float).ravel()
        n = numeric[name].ravel()
        scale = np.maximum(np.abs(a), np.abs(n))
        big = scale > significant
        if np.any(big):
            worst = max(worst, float(np.max(np.abs(a[big] - n[big]) / scale[big])))
        if np.any(~big) and np.max(np.abs(a[~big] - n[~big])) > abs_tol:
            return float("inf")
    return worst


def naive_conv(X, K, bias, stride, pad):
    """Six nested loops (plus batch) over X (H, W, C, B) and K (k, k, C, Co)."""
    H, W, C, B = X.shape
    k, _, _, Co = K.shape
    Xp = np.zeros((H + 2 * pad, W + 2 * pad, C, B))
    Xp[pad:pad + H, pad:pad + W] = X
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((Ho, Wo, Co, B))
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                s += K[di, dj, c, o] * Xp[i * stride + di, j * stride + dj, c, b]
                    out[i, j, o, b] = s + bias[o]
    return out


def brute_force_constrained_min(Q, grid: int = 20001, span: float = 4.0):
    """min a^T Q a over a = (t, 1 - t) by scanning t on a grid."""
    t = np.linspace(-span, span, grid)
    A = np.stack([t, 1 - t], axis=1)
    vals = np.einsum("ni,ij,nj->n", A, Q, A)
    k = int(np.argmin(vals))
    return A[k], vals[k]


def kkt_solve(G):
    """Solve [[2G, 1], [1^T, 0]] [a, mu] = [0, 1] densely."""
    m = G.shape[0]
    M = np.zeros((m + 1, m + 1))
    M[:m, :m] = 2 * G
    M[:m, m] = 1
    M[m, :m] = 1
    rhs = np.zeros(m + 1)
    rhs[m] = 1
    return np.linalg.solve(M, rhs)[:m]
