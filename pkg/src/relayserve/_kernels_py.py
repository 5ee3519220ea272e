"""Pure-Python kernel twin.

Mirrors the compiled extension (`_kernels_cy`) operation for operation:
reductions run in the same fixed sequential order and every transcendental
maps to the platform libm, so both backends produce bitwise-identical
results. Slow, but always importable.
"""

import math

import numpy as np


def matmul_nt(a, b):
    """C = A @ B.T for A (m, k), B (n, k); accumulation sequential over k."""
    m, k = a.shape
    n = b.shape[0]
    out = np.empty((m, n), dtype=np.float64)
    al = a.tolist()
    bl = b.tolist()
    for i in range(m):
        ai = al[i]
        row = out[i]
        for j in range(n):
            bj = bl[j]
            acc = 0.0
            for p in range(k):
                acc = acc + ai[p] * bj[p]
            row[j] = acc
    return out


def softmax_lse_rows(x):
    """Row-wise stable softmax plus log-sum-exp of each row."""
    r, c = x.shape
    probs = np.empty((r, c), dtype=np.float64)
    lse = np.empty(r, dtype=np.float64)
    xl = x.tolist()
    for i in range(r):
        row = xl[i]
        mx = row[0]
        for j in range(1, c):
            if row[j] > mx:
                mx = row[j]
        s = 0.0
        prow = probs[i]
        for j in range(c):
            e = math.exp(row[j] - mx)
            prow[j] = e
            s = s + e
        for j in range(c):
            prow[j] = prow[j] / s
        lse[i] = mx + math.log(s)
    return probs, lse


def softmax_lse_prefix(x, lens):
    """Softmax over a per-row prefix; entries past the prefix are exactly 0."""
    r, c = x.shape
    probs = np.zeros((r, c), dtype=np.float64)
    lse = np.empty(r, dtype=np.float64)
    xl = x.tolist()
    ll = [int(v) for v in lens]
    for i in range(r):
        row = xl[i]
        n = ll[i]
        mx = row[0]
        for j in range(1, n):
            if row[j] > mx:
                mx = row[j]
        s = 0.0
        prow = probs[i]
        for j in range(n):
            e = math.exp(row[j] - mx)
            prow[j] = e
            s = s + e
        for j in range(n):
            prow[j] = prow[j] / s
        lse[i] = mx + math.log(s)
    return probs, lse


def rope_rows(x, positions, base):
    """Rotate consecutive pairs of each row by angle position * base^(-2i/d)."""
    n, d = x.shape
    half = d // 2
    theta = [base ** ((-2.0 * j) / d) for j in range(half)]
    out = np.empty((n, d), dtype=np.float64)
    xl = x.tolist()
    pl = [float(v) for v in positions]
    for i in range(n):
        row = xl[i]
        orow = out[i]
        pos = pl[i]
        for j in range(half):
            ang = pos * theta[j]
            ca = math.cos(ang)
            sa = math.sin(ang)
            x0 = row[2 * j]
            x1 = row[2 * j + 1]
            orow[2 * j] = x0 * ca - x1 * sa
            orow[2 * j + 1] = x0 * sa + x1 * ca
    return out


def naive_attention_head(q, k, v, scale):
    """Brute-force causal attention for one head: full softmax per query."""
    l, d = q.shape
    out = np.empty((l, d), dtype=np.float64)
    ql = q.tolist()
    kl = k.tolist()
    vl = v.tolist()
    scores = [0.0] * l
    w = [0.0] * l
    for t in range(l):
        qt = ql[t]
        for j in range(t + 1):
            kj = kl[j]
            acc = 0.0
            for p in range(d):
                acc = acc + qt[p] * kj[p]
            scores[j] = acc * scale
        mx = scores[0]
        for j in range(1, t + 1):
            if scores[j] > mx:
                mx = scores[j]
        s = 0.0
        for j in range(t + 1):
            e = math.exp(scores[j] - mx)
            w[j] = e
            s = s + e
        orow = out[t]
        for p in range(d):
            orow[p] = 0.0
        for j in range(t + 1):
            wj = w[j] / s
            vj = vl[j]
            for p in range(d):
                orow[p] = orow[p] + wj * vj[p]
    return out
