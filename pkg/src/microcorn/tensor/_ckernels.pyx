# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Each kernel makes a single pass over its data instead of the several
temporaries the NumPy version allocates.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt, INFINITY

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    with nogil:
        for i in range(n):
            y[i] = 0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2))
    return out


def gelu_bwd(double[::1] x, double[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double cdf, pdf
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = out
    with nogil:
        for i in range(n):
            cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
            pdf = INV_SQRT_2PI * exp(-0.5 * x[i] * x[i])
            gx[i] = gy[i] * (cdf + x[i] * pdf)
    return out


def layernorm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double mean, var, c, rs
    y_arr = np.empty((rows, d), dtype=np.float64)
    xhat_arr = np.empty((rows, d), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    with nogil:
        for r in range(rows):
            mean = 0.0
            for j in range(d):
                mean += x[r, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[r, j] - mean
                var += c * c
            var /= d
            rs = 1.0 / sqrt(var + eps)
            rstd[r] = rs
            for j in range(d):
                c = (x[r, j] - mean) * rs
                xhat[r, j] = c
                y[r, j] = c * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd(double[:, ::1] gy, double[:, ::1] xhat, double[::1] rstd, double[::1] gain):
    cdef Py_ssize_t r, j, rows = gy.shape[0], d = gy.shape[1]
    cdef double s1, s2, g
    gx_arr = np.empty((rows, d), dtype=np.float64)
    ggain_arr = np.zeros(d, dtype=np.float64)
    gbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    with nogil:
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = gy[r, j] * gain[j]
                s1 += g
                s2 += g * xhat[r, j]
                ggain[j] += gy[r, j] * xhat[r, j]
                gbias[j] += gy[r, j]
            for j in range(d):
                g = gy[r, j] * gain[j]
                gx[r, j] = (rstd[r] / d) * (d * g - s1 - xhat[r, j] * s2)
    return gx_arr, ggain_arr, gbias_arr


def causal_attn_fwd(double[:, :, ::1] q, double[:, :, ::1] k, double[:, :, ::1] v, double scale):
    cdef Py_ssize_t n = q.shape[0], t = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t b, i, j, c
    cdef double s, m, z
    out_arr = np.zeros((n, t, dh), dtype=np.float64)
    p_arr = np.zeros((n, t, t), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] p = p_arr
    with nogil:
        for b in range(n):
            for i in range(t):
                m = -INFINITY
                for j in range(i + 1):
                    s = 0.0
                    for c in range(dh):
                        s += q[b, i, c] * k[b, j, c]
                    s *= scale
                    p[b, i, j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(i + 1):
                    p[b, i, j] = exp(p[b, i, j] - m)
                    z += p[b, i, j]
                for j in range(i + 1):
                    p[b, i, j] /= z
                    for c in range(dh):
                        out[b, i, c] += p[b, i, j] * v[b, j, c]
    return out_arr, p_arr


def causal_attn_bwd(double[:, :, ::1] gout, double[:, :, ::1] q, double[:, :, ::1] k,
                    double[:, :, ::1] v, double[:, :, ::1] p, double scale):
    cdef Py_ssize_t n = q.shape[0], t = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t b, i, j, c
    cdef double gp, dot
    gq_arr = np.zeros((n, t, dh), dtype=np.float64)
    gk_arr = np.zeros((n, t, dh), dtype=np.float64)
    gv_arr = np.zeros((n, t, dh), dtype=np.float64)
    row_arr = np.empty(t, dtype=np.float64)
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double[::1] gs = row_arr
    with nogil:
        for b in range(n):
            for i in range(t):
                dot = 0.0
                for j in range(i + 1):
                    gp = 0.0
                    for c in range(dh):
                        gp += gout[b, i, c] * v[b, j, c]
                        gv[b, j, c] += p[b, i, j] * gout[b, i, c]
                    gs[j] = gp
                    dot += gp * p[b, i, j]
                for j in range(i + 1):
                    gs[j] = p[b, i, j] * (gs[j] - dot) * scale
                    for c in range(dh):
                        gq[b, i, c] += gs[j] * k[b, j, c]
                        gk[b, j, c] += gs[j] * q[b, i, c]
    return gq_arr, gk_arr, gv_arr


def xent_fwd(double[:, ::1] logits, long[::1] targets):
    cdef Py_ssize_t r, j, rows = logits.shape[0], v = logits.shape[1]
    cdef double m, z, total = 0.0
    cdef long count = 0
    probs_arr = np.empty((rows, v), dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    with nogil:
        for r in range(rows):
            m = logits[r, 0]
            for j in range(1, v):
                if logits[r, j] > m:
                    m = logits[r, j]
            z = 0.0
            for j in range(v):
                probs[r, j] = exp(logits[r, j] - m)
                z += probs[r, j]
            for j in range(v):
                probs[r, j] /= z
            if targets[r] >= 0:
                total -= logits[r, targets[r]] - m - log(z)
                count += 1
    return total, count, probs_arr


def xent_bwd(double[:, ::1] probs, long[::1] targets, double scale):
    cdef Py_ssize_t r, j, rows = probs.shape[0], v = probs.shape[1]
    out = np.zeros((rows, v), dtype=np.float64)
    cdef double[:, ::1] g = out
    with nogil:
        for r in range(rows):
            if targets[r] < 0:
                continue
            for j in range(v):
                g[r, j] = probs[r, j] * scale
            g[r, targets[r]] -= scale
    return out
