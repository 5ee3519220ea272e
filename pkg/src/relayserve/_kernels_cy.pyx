# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core.

Same fixed-order arithmetic as `_kernels_py`; built with -ffp-contract=off
so results stay bitwise-identical to the pure-Python twin.
"""

from libc.math cimport cos, exp, log, pow, sin

import numpy as np


def matmul_nt(const double[:, ::1] a, const double[:, ::1] b):
    """C = A @ B.T for A (m, k), B (n, k); accumulation sequential over k."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc = acc + a[i, p] * b[j, p]
            out[i, j] = acc
    return out_arr


def softmax_lse_rows(const double[:, ::1] x):
    """Row-wise stable softmax plus log-sum-exp of each row."""
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    probs_arr = np.empty((r, c), dtype=np.float64)
    lse_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    cdef double[::1] lse = lse_arr
    cdef Py_ssize_t i, j
    cdef double mx, s, e
    for i in range(r):
        mx = x[i, 0]
        for j in range(1, c):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(c):
            e = exp(x[i, j] - mx)
            probs[i, j] = e
            s = s + e
        for j in range(c):
            probs[i, j] = probs[i, j] / s
        lse[i] = mx + log(s)
    return probs_arr, lse_arr


def softmax_lse_prefix(const double[:, ::1] x, const long long[::1] lens):
    """Softmax over a per-row prefix; entries past the prefix are exactly 0."""
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    probs_arr = np.zeros((r, c), dtype=np.float64)
    lse_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] probs = probs_arr
    cdef double[::1] lse = lse_arr
    cdef Py_ssize_t i, j, n
    cdef double mx, s, e
    for i in range(r):
        n = <Py_ssize_t> lens[i]
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            e = exp(x[i, j] - mx)
            probs[i, j] = e
            s = s + e
        for j in range(n):
            probs[i, j] = probs[i, j] / s
        lse[i] = mx + log(s)
    return probs_arr, lse_arr


def rope_rows(const double[:, ::1] x, const long long[::1] positions, double base):
    """Rotate consecutive pairs of each row by angle position * base^(-2i/d)."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t half = d // 2
    theta_arr = np.empty(half, dtype=np.float64)
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[::1] theta = theta_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double pos, ang, ca, sa, x0, x1
    for j in range(half):
        theta[j] = pow(base, (-2.0 * j) / d)
    for i in range(n):
        pos = <double> positions[i]
        for j in range(half):
            ang = pos * theta[j]
            ca = cos(ang)
            sa = sin(ang)
            x0 = x[i, 2 * j]
            x1 = x[i, 2 * j + 1]
            out[i, 2 * j] = x0 * ca - x1 * sa
            out[i, 2 * j + 1] = x0 * sa + x1 * ca
    return out_arr


def naive_attention_head(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v,
                         double scale):
    """Brute-force causal attention for one head: full softmax per query."""
    cdef Py_ssize_t l = q.shape[0], d = q.shape[1]
    out_arr = np.empty((l, d), dtype=np.float64)
    scores_arr = np.empty(l, dtype=np.float64)
    w_arr = np.empty(l, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] scores = scores_arr
    cdef double[::1] w = w_arr
    cdef Py_ssize_t t, j, p
    cdef double acc, mx, s, e, wj
    for t in range(l):
        for j in range(t + 1):
            acc = 0.0
            for p in range(d):
                acc = acc + q[t, p] * k[j, p]
            scores[j] = acc * scale
        mx = scores[0]
        for j in range(1, t + 1):
            if scores[j] > mx:
                mx = scores[j]
        s = 0.0
        for j in range(t + 1):
            e = exp(scores[j] - mx)
            w[j] = e
            s = s + e
        for p in range(d):
            out[t, p] = 0.0
        for j in range(t + 1):
            wj = w[j] / s
            for p in range(d):
                out[t, p] = out[t, p] + wj * v[j, p]
    return out_arr
