"""Pure-numpy Sinkhorn kernels (log domain).

Mirrors the compiled extension in partforge.kernels._sinkhorn_cy: same
update order, same stopping rule, same cached-potential layout, so either
backend can be swapped in without changing results beyond rounding.
"""
from __future__ import annotations

import numpy as np


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_forward(
    C: np.ndarray,
    log_r: np.ndarray,
    log_c: np.ndarray,
    eps: float,
    max_iter: int,
    tol: float,
):
    """Alternating log-domain potential updates.

    Returns (f_hist, g_hist, n_iter, residual): f_hist[t], g_hist[t] are the
    potentials after iteration t; residual is the L-inf marginal error of
    the plan at exit. tol == 0 disables early stopping.
    """
    n, m = C.shape
    f_hist = np.zeros((max_iter, n))
    g_hist = np.zeros((max_iter, m))
    g = np.zeros(m)
    residual = np.inf
    n_iter = 0
    for t in range(max_iter):
        f = eps * log_r - eps * _logsumexp((g[None, :] - C) / eps, axis=1)
        g = eps * log_c - eps * _logsumexp((f[:, None] - C) / eps, axis=0)
        f_hist[t] = f
        g_hist[t] = g
        n_iter = t + 1
        X = np.exp((f[:, None] + g[None, :] - C) / eps)
        residual = max(
            np.abs(X.sum(axis=1) - np.exp(log_r)).max(),
            np.abs(X.sum(axis=0) - np.exp(log_c)).max(),
        )
        if residual < tol:
            break
    return f_hist[:n_iter], g_hist[:n_iter], n_iter, float(residual)


def plan_from_potentials(C: np.ndarray, f: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    return np.exp((f[:, None] + g[None, :] - C) / eps)


def sinkhorn_backward(
    C: np.ndarray,
    f_hist: np.ndarray,
    g_hist: np.ndarray,
    eps: float,
    dX: np.ndarray,
) -> np.ndarray:
    """Gradient of the plan w.r.t. the cost matrix through the unrolled
    iterations; marginals are treated as constants."""
    n_iter = f_hist.shape[0]
    f = f_hist[n_iter - 1]
    g = g_hist[n_iter - 1]
    X = plan_from_potentials(C, f, g, eps)
    dXX = dX * X / eps
    df = dXX.sum(axis=1)
    dg = dXX.sum(axis=0)
    dC = -dXX
    for t in range(n_iter - 1, -1, -1):
        f_t = f_hist[t]
        g_prev = g_hist[t - 1] if t > 0 else np.zeros_like(g_hist[0])
        # g_t = eps*log_c - eps*LSE_i((f_t - C)/eps): column softmax
        a = (f_t[:, None] - C) / eps
        a -= a.max(axis=0, keepdims=True)
        A = np.exp(a)
        A /= A.sum(axis=0, keepdims=True)
        df = df - A @ dg
        dC += A * dg[None, :]
        # f_t = eps*log_r - eps*LSE_j((g_prev - C)/eps): row softmax
        b = (g_prev[None, :] - C) / eps
        b -= b.max(axis=1, keepdims=True)
        B = np.exp(b)
        B /= B.sum(axis=1, keepdims=True)
        dg = -(df[:, None] * B).sum(axis=0)
        dC += df[:, None] * B
        df = np.zeros_like(df)
    return dC
