# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Sinkhorn kernels (log domain).

Drop-in twin of partforge.kernels.sinkhorn_np; the problems here are tiny
(a handful of parts vs a few dozen words) so interpreter overhead, not
vector width, dominates -- plain C loops win by a wide margin.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY

cnp.import_array()


def sinkhorn_forward(
    double[:, ::1] C,
    double[:] log_r,
    double[:] log_c,
    double eps,
    int max_iter,
    double tol,
):
    cdef int n = C.shape[0]
    cdef int m = C.shape[1]
    f_hist_arr = np.zeros((max_iter, n), dtype=np.float64)
    g_hist_arr = np.zeros((max_iter, m), dtype=np.float64)
    cdef double[:, ::1] f_hist = f_hist_arr
    cdef double[:, ::1] g_hist = g_hist_arr
    cdef double[:] f = np.zeros(n)
    cdef double[:] g = np.zeros(m)
    cdef double[:] r = np.exp(log_r)
    cdef double[:] c = np.exp(log_c)
    cdef int t, i, j, n_iter = 0
    cdef double mx, s, v, residual = INFINITY, row_sum, col_err, row_err

    for t in range(max_iter):
        # f_i = eps*log_r_i - eps*LSE_j((g_j - C_ij)/eps)
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                v = g[j] - C[i, j]
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                s += exp((g[j] - C[i, j] - mx) / eps)
            f[i] = eps * log_r[i] - mx - eps * log(s)
        # g_j = eps*log_c_j - eps*LSE_i((f_i - C_ij)/eps)
        for j in range(m):
            mx = -INFINITY
            for i in range(n):
                v = f[i] - C[i, j]
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                s += exp((f[i] - C[i, j] - mx) / eps)
            g[j] = eps * log_c[j] - mx - eps * log(s)
        for i in range(n):
            f_hist[t, i] = f[i]
        for j in range(m):
            g_hist[t, j] = g[j]
        n_iter = t + 1
        # marginal L-inf residual of the current plan
        row_err = 0.0
        for i in range(n):
            row_sum = 0.0
            for j in range(m):
                row_sum += exp((f[i] + g[j] - C[i, j]) / eps)
            if fabs(row_sum - r[i]) > row_err:
                row_err = fabs(row_sum - r[i])
        col_err = 0.0
        for j in range(m):
            row_sum = 0.0
            for i in range(n):
                row_sum += exp((f[i] + g[j] - C[i, j]) / eps)
            if fabs(row_sum - c[j]) > col_err:
                col_err = fabs(row_sum - c[j])
        residual = row_err if row_err > col_err else col_err
        if residual < tol:
            break
    return f_hist_arr[:n_iter], g_hist_arr[:n_iter], n_iter, residual


def plan_from_potentials(C, f, g, double eps):
    return np.exp((np.asarray(f)[:, None] + np.asarray(g)[None, :] - np.asarray(C)) / eps)


def sinkhorn_backward(
    double[:, ::1] C,
    double[:, ::1] f_hist,
    double[:, ::1] g_hist,
    double eps,
    double[:, ::1] dX,
):
    cdef int n = C.shape[0]
    cdef int m = C.shape[1]
    cdef int n_iter = f_hist.shape[0]
    dC_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] dC = dC_arr
    cdef double[:] df = np.zeros(n)
    cdef double[:] dg = np.zeros(m)
    cdef double[:] dg_new = np.zeros(m)
    A_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] A = A_arr
    cdef int t, i, j
    cdef double mx, s, x, w

    # seed from the plan: X_ij = exp((f_i + g_j - C_ij)/eps)
    for i in range(n):
        for j in range(m):
            x = exp((f_hist[n_iter - 1, i] + g_hist[n_iter - 1, j] - C[i, j]) / eps)
            w = dX[i, j] * x / eps
            df[i] += w
            dg[j] += w
            dC[i, j] = -w

    for t in range(n_iter - 1, -1, -1):
        # column softmax of (f_t - C)/eps; backward through the g update
        for j in range(m):
            mx = -INFINITY
            for i in range(n):
                x = f_hist[t, i] - C[i, j]
                if x > mx:
                    mx = x
            s = 0.0
            for i in range(n):
                A[i, j] = exp((f_hist[t, i] - C[i, j] - mx) / eps)
                s += A[i, j]
            for i in range(n):
                A[i, j] /= s
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += A[i, j] * dg[j]
                dC[i, j] += A[i, j] * dg[j]
            df[i] -= s
        # row softmax of (g_{t-1} - C)/eps; backward through the f update
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                x = (g_hist[t - 1, j] if t > 0 else 0.0) - C[i, j]
                if x > mx:
                    mx = x
            s = 0.0
            for j in range(m):
                A[i, j] = exp(((g_hist[t - 1, j] if t > 0 else 0.0) - C[i, j] - mx) / eps)
                s += A[i, j]
            for j in range(m):
                A[i, j] /= s
        for j in range(m):
            dg_new[j] = 0.0
        for i in range(n):
            for j in range(m):
                w = df[i] * A[i, j]
                dg_new[j] -= w
                dC[i, j] += w
        for j in range(m):
            dg[j] = dg_new[j]
        for i in range(n):
            df[i] = 0.0
    return dC_arr
