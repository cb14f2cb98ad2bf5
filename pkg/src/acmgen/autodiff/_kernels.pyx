# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels. Signatures match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt

cdef extern from "fastexp.h" nogil:
    double exp "acm_exp"(double x)
    double tanh "acm_tanh"(double x)

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_fwd(const double[:, ::1] x, Py_ssize_t causal_t=0):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j, width
    out_arr = np.zeros((n, v))
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    with nogil:
        for i in range(n):
            width = (i % causal_t) + 1 if causal_t > 0 else v
            m = x[i, 0]
            for j in range(1, width):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(width):
                out[i, j] = exp(x[i, j] - m)
                s += out[i, j]
            s = 1.0 / s
            for j in range(width):
                out[i, j] *= s
    return out_arr


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], v = y.shape[1], i, j
    out_arr = np.empty((n, v))
    cdef double[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(v):
                dot += y[i, j] * g[i, j]
            for j in range(v):
                out[i, j] = y[i, j] * (g[i, j] - dot)
    return out_arr


def layernorm_fwd(const double[:, ::1] x, const double[::1] gamma,
                  const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, c, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xhat[i, j] = c
                y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                  const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    gx_arr = np.empty((n, d))
    gg_arr = np.zeros(d)
    gb_arr = np.zeros(d)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, t
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gg[j] += g[i, j] * xhat[i, j]
                gb[j] += g[i, j]
                t = g[i, j] * gamma[j]
                m1 += t
                m2 += t * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def gelu_fwd(x_in):
    x_arr = np.ascontiguousarray(x_in)
    cdef const double[::1] x = x_arr.reshape(-1)
    out_arr = np.empty(x_arr.shape)
    cdef double[::1] out = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out_arr


def gelu_bwd(x_in, g_in):
    x_arr = np.ascontiguousarray(x_in)
    g_arr = np.ascontiguousarray(g_in)
    cdef const double[::1] x = x_arr.reshape(-1)
    cdef const double[::1] g = g_arr.reshape(-1)
    out_arr = np.empty(x_arr.shape)
    cdef double[::1] out = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, v2, th
    with nogil:
        for i in range(n):
            v = x[i]
            v2 = v * v
            th = tanh(GELU_C * (v + GELU_A * v2 * v))
            out[i] = g[i] * (0.5 * (1.0 + th)
                             + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v2))
    return out_arr


def xent_fwd(const double[:, ::1] logits, const cnp.int64_t[::1] targets,
             const double[::1] mask):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1], i, j
    probs_arr = np.empty((n, v))
    cdef double[:, ::1] probs = probs_arr
    cdef double m, s, total = 0.0
    with nogil:
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(v):
                probs[i, j] = exp(logits[i, j] - m)
                s += probs[i, j]
            if mask[i] != 0.0:
                total += mask[i] * (log(s) + m - logits[i, targets[i]])
            s = 1.0 / s
            for j in range(v):
                probs[i, j] *= s
    return total, probs_arr


def xent_bwd(const double[:, ::1] probs, const cnp.int64_t[::1] targets,
             const double[::1] mask, double scale):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1], i, j
    out_arr = np.zeros((n, v))
    cdef double[:, ::1] out = out_arr
    cdef double w
    with nogil:
        for i in range(n):
            w = mask[i] * scale
            if w == 0.0:
                continue
            for j in range(v):
                out[i, j] = probs[i, j] * w
            out[i, targets[i]] -= w
    return out_arr


def embedding_bwd(const cnp.int64_t[::1] ids, const double[:, ::1] g, Py_ssize_t n_rows):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j, r
    out_arr = np.zeros((n_rows, d))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(d):
                out[r, j] += g[i, j]
    return out_arr
