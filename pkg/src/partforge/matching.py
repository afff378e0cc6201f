"""Cross-modal similarity: cosine transport costs, Sinkhorn flow, EMD score.

The differentiable path caches the per-iteration Sinkhorn potentials and
backpropagates through the unrolled iterations exactly as they were run.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels

NORM_GUARD = 1e-8

DEFAULT_EPSILON = 0.05
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-6


class MatchingError(ValueError):
    pass


@dataclass
class TransportPlan:
    plan: np.ndarray  # (N, M), nonnegative, sums to 1
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    epsilon: float
    iterations: int
    residual: float


def cost_matrix(S: np.ndarray, W: np.ndarray) -> np.ndarray:
    """c_ij = 1 - cos(s_i, w_j), with a small norm guard; entries in [0, 2]."""
    S = np.asarray(S, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    ns = np.linalg.norm(S, axis=1) + NORM_GUARD
    nw = np.linalg.norm(W, axis=1) + NORM_GUARD
    return 1.0 - (S @ W.T) / np.outer(ns, nw)


def cost_matrix_backward(S, W, dC):
    """Gradients of cost_matrix w.r.t. both feature matrices."""
    S = np.asarray(S, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    norm_s = np.linalg.norm(S, axis=1)
    norm_w = np.linalg.norm(W, axis=1)
    ns = norm_s + NORM_GUARD
    nw = norm_w + NORM_GUARD
    dot = S @ W.T
    dcos = -np.asarray(dC)
    inv = 1.0 / np.outer(ns, nw)
    ddot = dcos * inv
    dns = -(dcos * dot * inv / ns[:, None]).sum(axis=1)
    dnw = -(dcos * dot * inv / nw[None, :]).sum(axis=0)
    dS = ddot @ W
    dW = ddot.T @ S
    nz_s = norm_s > 0
    nz_w = norm_w > 0
    dS[nz_s] += (dns[nz_s] / norm_s[nz_s])[:, None] * S[nz_s]
    dW[nz_w] += (dnw[nz_w] / norm_w[nz_w])[:, None] * W[nz_w]
    return dS, dW


def sinkhorn(
    C: np.ndarray,
    r: np.ndarray,
    c: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> TransportPlan:
    """Entropic-regularized transport plan, computed in the log domain.

    Stops when the marginal L-inf residual drops below tol or max_iter is
    reached.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise MatchingError("sinkhorn: non-finite cost matrix")
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(r < 0) or np.any(c < 0):
        raise MatchingError("sinkhorn: negative marginals")
    if epsilon <= 0:
        raise MatchingError("sinkhorn: epsilon must be positive")
    f_hist, g_hist, n_iter, residual = kernels.sinkhorn_forward(
        C, np.log(r), np.log(c), epsilon, max_iter, tol
    )
    plan = kernels.plan_from_potentials(C, f_hist[n_iter - 1], g_hist[n_iter - 1], epsilon)
    return TransportPlan(plan, r, c, epsilon, n_iter, residual)


def emd_similarity(C: np.ndarray, X: np.ndarray) -> float:
    """Negated transport cost -sum c_ij x_ij; in [-2, 0] for unit mass."""
    C = np.asarray(C)
    X = np.asarray(X)
    if C.shape != X.shape:
        raise MatchingError(f"shape mismatch {C.shape} vs {X.shape}")
    return float(-(C * X).sum())


def uniform_marginals(n: int, m: int):
    return np.full(n, 1.0 / n), np.full(m, 1.0 / m)


def pair_similarity(
    S: np.ndarray,
    W: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> float:
    """EMD similarity between part features S and word features W."""
    value, _ = pair_similarity_with_cache(S, W, epsilon, max_iter, tol)
    return value


def pair_similarity_with_cache(S, W, epsilon=DEFAULT_EPSILON, max_iter=DEFAULT_MAX_ITER,
                               tol=DEFAULT_TOL):
    """Forward pass retaining everything the backward pass needs."""
    S = np.asarray(S, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    C = np.ascontiguousarray(cost_matrix(S, W))
    if not np.all(np.isfinite(C)):
        raise MatchingError("pair_similarity: non-finite cost matrix")
    r, c = uniform_marginals(S.shape[0], W.shape[0])
    f_hist, g_hist, n_iter, residual = kernels.sinkhorn_forward(
        C, np.log(r), np.log(c), epsilon, max_iter, tol
    )
    X = kernels.plan_from_potentials(C, f_hist[n_iter - 1], g_hist[n_iter - 1], epsilon)
    value = emd_similarity(C, X)
    cache = {
        "S": S, "W": W, "C": C, "X": X,
        "f_hist": np.ascontiguousarray(f_hist),
        "g_hist": np.ascontiguousarray(g_hist),
        "epsilon": epsilon, "residual": residual, "iterations": n_iter,
    }
    return value, cache


def pair_similarity_backward(cache: dict, dvalue: float = 1.0):
    """Exact gradient of pair_similarity w.r.t. (S, W), replaying the
    Sinkhorn iterations recorded in the cache."""
    C, X = cache["C"], cache["X"]
    dC = -X * dvalue  # direct dependence of -sum(C*X) on C
    dX = np.ascontiguousarray(-C * dvalue)
    dC = dC + kernels.sinkhorn_backward(
        C, cache["f_hist"], cache["g_hist"], cache["epsilon"], dX
    )
    return cost_matrix_backward(cache["S"], cache["W"], dC)


def score_matrix(
    shape_features: list[np.ndarray],
    text_features: list[np.ndarray],
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """B x B matrix of pair similarities (entry ij: shape i vs text j)."""
    if len(shape_features) != len(text_features):
        raise MatchingError("score_matrix: batch sizes differ")
    b = len(shape_features)
    out = np.empty((b, b))
    for i in range(b):
        for j in range(b):
            out[i, j] = pair_similarity(shape_features[i], text_features[j],
                                        epsilon, max_iter, tol)
    return out


def cosine_global_similarity(S: np.ndarray, W: np.ndarray) -> float:
    """Cosine between mean-pooled part and word features (ablation baseline)."""
    value, _ = cosine_global_with_cache(S, W)
    return value


def cosine_global_with_cache(S, W):
    S = np.asarray(S, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    ms = S.mean(axis=0)
    mw = W.mean(axis=0)
    ns = np.linalg.norm(ms) + NORM_GUARD
    nw = np.linalg.norm(mw) + NORM_GUARD
    value = float(ms @ mw / (ns * nw))
    return value, {"S": S, "W": W, "ms": ms, "mw": mw, "ns": ns, "nw": nw}


def cosine_global_backward(cache: dict, dvalue: float = 1.0):
    ms, mw, ns, nw = cache["ms"], cache["mw"], cache["ns"], cache["nw"]
    dot = ms @ mw
    dms = dvalue * mw / (ns * nw)
    dmw = dvalue * ms / (ns * nw)
    norm_ms = np.linalg.norm(ms)
    norm_mw = np.linalg.norm(mw)
    if norm_ms > 0:
        dms -= dvalue * dot / (ns * ns * nw) * ms / norm_ms
    if norm_mw > 0:
        dmw -= dvalue * dot / (ns * nw * nw) * mw / norm_mw
    n, m = cache["S"].shape[0], cache["W"].shape[0]
    dS = np.tile(dms / n, (n, 1))
    dW = np.tile(dmw / m, (m, 1))
    return dS, dW


def exact_uniform_similarity(C: np.ndarray) -> float:
    """Reference optimum for square uniform-marginal problems, found by
    enumerating all assignment permutations. Independent of Sinkhorn."""
    C = np.asarray(C)
    n, m = C.shape
    if n != m:
        raise MatchingError("exact_uniform_similarity: square cost required")
    best = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return float(-best / n)
