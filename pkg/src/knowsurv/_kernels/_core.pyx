# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused attention softmax and normalizations.

Contracts identical to numpy_ref; inputs are float64, outputs are fresh
C-contiguous arrays. Shapes: attention works per head on (H, n, d_h)
stacks, layer norm on (n, d) matrices, row norm on (H, nq, nk) stacks.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND = "compiled"


def attention_probs_fwd(Q, K, double scale):
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    K = np.ascontiguousarray(K, dtype=np.float64)
    cdef double[:, :, ::1] q = Q
    cdef double[:, :, ::1] k = K
    cdef Py_ssize_t H = q.shape[0], nq = q.shape[1], dh = q.shape[2], nk = k.shape[1]
    P_arr = np.empty((H, nq, nk), dtype=np.float64)
    cdef double[:, :, ::1] p = P_arr
    cdef Py_ssize_t h, i, j, c
    cdef double s, m, tot
    for h in range(H):
        for i in range(nq):
            m = -1e300
            for j in range(nk):
                s = 0.0
                for c in range(dh):
                    s += q[h, i, c] * k[h, j, c]
                s *= scale
                p[h, i, j] = s
                if s > m:
                    m = s
            tot = 0.0
            for j in range(nk):
                s = exp(p[h, i, j] - m)
                p[h, i, j] = s
                tot += s
            for j in range(nk):
                p[h, i, j] /= tot
    return P_arr


def attention_probs_bwd(Q, K, P, dP, double scale):
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    K = np.ascontiguousarray(K, dtype=np.float64)
    P = np.ascontiguousarray(P, dtype=np.float64)
    dP = np.ascontiguousarray(dP, dtype=np.float64)
    cdef double[:, :, ::1] q = Q, k = K, p = P, dp = dP
    cdef Py_ssize_t H = q.shape[0], nq = q.shape[1], dh = q.shape[2], nk = k.shape[1]
    dQ_arr = np.zeros((H, nq, dh), dtype=np.float64)
    dK_arr = np.zeros((H, nk, dh), dtype=np.float64)
    cdef double[:, :, ::1] dq = dQ_arr, dk = dK_arr
    cdef Py_ssize_t h, i, j, c
    cdef double rowdot, ds
    for h in range(H):
        for i in range(nq):
            rowdot = 0.0
            for j in range(nk):
                rowdot += dp[h, i, j] * p[h, i, j]
            for j in range(nk):
                ds = p[h, i, j] * (dp[h, i, j] - rowdot) * scale
                for c in range(dh):
                    dq[h, i, c] += ds * k[h, j, c]
                    dk[h, j, c] += ds * q[h, i, c]
    return dQ_arr, dK_arr


def layernorm_fwd(X, gamma, beta, double eps):
    X = np.ascontiguousarray(X, dtype=np.float64)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    cdef double[:, ::1] x = X
    cdef double[::1] g = gamma, b = beta
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    Y_arr = np.empty((n, d), dtype=np.float64)
    mean_arr = np.empty((n, 1), dtype=np.float64)
    rstd_arr = np.empty((n, 1), dtype=np.float64)
    cdef double[:, ::1] y = Y_arr, mu = mean_arr, rs = rstd_arr
    cdef Py_ssize_t i, j
    cdef double m, v, diff, r
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            diff = x[i, j] - m
            v += diff * diff
        v /= d
        r = 1.0 / sqrt(v + eps)
        mu[i, 0] = m
        rs[i, 0] = r
        for j in range(d):
            y[i, j] = (x[i, j] - m) * r * g[j] + b[j]
    return Y_arr, mean_arr, rstd_arr


def layernorm_bwd(X, gamma, mean, rstd, dY):
    X = np.ascontiguousarray(X, dtype=np.float64)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    rstd = np.ascontiguousarray(rstd, dtype=np.float64)
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    cdef double[:, ::1] x = X, mu = mean, rs = rstd, dy = dY
    cdef double[::1] g = gamma
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dX_arr = np.empty((n, d), dtype=np.float64)
    dg_arr = np.zeros(d, dtype=np.float64)
    db_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dX_arr
    cdef double[::1] dg = dg_arr, db = db_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, dxh, r, m
    for i in range(n):
        m = mu[i, 0]
        r = rs[i, 0]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - m) * r
            dxh = dy[i, j] * g[j]
            dg[j] += dy[i, j] * xhat
            db[j] += dy[i, j]
            m1 += dxh
            m2 += dxh * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - m) * r
            dx[i, j] = r * (dy[i, j] * g[j] - m1 - xhat * m2)
    return dX_arr, dg_arr, db_arr


def rownorm_fwd(X, double gamma, double beta, double eps):
    X = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, :, ::1] x = X
    cdef Py_ssize_t H = x.shape[0], n = x.shape[1], d = x.shape[2]
    Y_arr = np.empty((H, n, d), dtype=np.float64)
    mean_arr = np.empty((H, n, 1), dtype=np.float64)
    rstd_arr = np.empty((H, n, 1), dtype=np.float64)
    cdef double[:, :, ::1] y = Y_arr, mu = mean_arr, rs = rstd_arr
    cdef Py_ssize_t h, i, j
    cdef double m, v, diff, r
    for h in range(H):
        for i in range(n):
            m = 0.0
            for j in range(d):
                m += x[h, i, j]
            m /= d
            v = 0.0
            for j in range(d):
                diff = x[h, i, j] - m
                v += diff * diff
            v /= d
            r = 1.0 / sqrt(v + eps)
            mu[h, i, 0] = m
            rs[h, i, 0] = r
            for j in range(d):
                y[h, i, j] = (x[h, i, j] - m) * r * gamma + beta
    return Y_arr, mean_arr, rstd_arr


def rownorm_bwd(X, double gamma, mean, rstd, dY):
    X = np.ascontiguousarray(X, dtype=np.float64)
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    rstd = np.ascontiguousarray(rstd, dtype=np.float64)
    dY = np.ascontiguousarray(dY, dtype=np.float64)
    cdef double[:, :, ::1] x = X, mu = mean, rs = rstd, dy = dY
    cdef Py_ssize_t H = x.shape[0], n = x.shape[1], d = x.shape[2]
    dX_arr = np.empty((H, n, d), dtype=np.float64)
    cdef double[:, :, ::1] dx = dX_arr
    cdef double dgamma = 0.0, dbeta = 0.0
    cdef Py_ssize_t h, i, j
    cdef double m1, m2, xhat, dxh, r, m
    for h in range(H):
        for i in range(n):
            m = mu[h, i, 0]
            r = rs[h, i, 0]
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat = (x[h, i, j] - m) * r
                dgamma += dy[h, i, j] * xhat
                dbeta += dy[h, i, j]
                dxh = dy[h, i, j] * gamma
                m1 += dxh
                m2 += dxh * xhat
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (x[h, i, j] - m) * r
                dx[h, i, j] = r * (dy[h, i, j] * gamma - m1 - xhat * m2)
    return dX_arr, float(dgamma), float(dbeta)
