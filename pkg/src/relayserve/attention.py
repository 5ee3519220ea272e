"""Causal attention paths: brute-force oracle, LSE-returning attention,
relay fusion, and the two instrumented batch steps (baseline and relay).

Shapes follow the (batch, new_tokens, heads, head_dim) layout. Logits are
scaled by 1/sqrt(head_dim) in every path, so equivalence between paths is
unaffected. Traffic counters use the element-count convention of the cost
model: one attended token position costs head_dim*heads elements for its
key/value pair, query and output vectors cost head_dim*heads each, and
log-sum-exp scalars are tracked separately (see TrafficCounter).

Everything here is a pure function of its inputs; the per-request loops
run sequentially with a fixed reduction order per request, so results and
counter updates are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from relayserve import kernels
from relayserve.errors import ContractError, DimensionError
from relayserve.numerics import as_tensor


@dataclass
class TrafficCounter:
    """Per-step element-access accounting for attention.

    elements_read is the total number of elements moved between cache
    storage and compute scratch during attention steps, loads and stores
    combined; elements_written is the store-side subset of it. Log-sum-exp
    scalars are deliberately excluded from both and reported in
    lse_elements instead, so elements_read matches the cost model's
    closed-form counts exactly.
    """

    elements_read: int = 0
    elements_written: int = 0
    lse_elements: int = 0

    def add_load(self, n: int):
        self.elements_read += n

    def add_store(self, n: int):
        self.elements_read += n
        self.elements_written += n

    def add_lse(self, n: int):
        self.lse_elements += n

    def reset(self):
        self.elements_read = 0
        self.elements_written = 0
        self.lse_elements = 0


@dataclass
class LseAttentionOutput:
    """Attention output plus the log-sum-exp of each query's logits.

    output: (b, m, h, d); lse: (b, m, h), one scalar per query per head.
    Each output vector is a convex combination of attended value vectors.
    """

    output: np.ndarray
    lse: np.ndarray


def naive_causal_attention(q, k, v):
    """Brute-force causal attention over a full sequence; the oracle.

    q, k, v: (l, h, d). Position t attends positions 0..t of the same
    sequence at scale 1/sqrt(d). No caching, no instrumentation; every
    equivalence test in the package bottoms out here.
    """
    q = as_tensor(q, 3, "q")
    k = as_tensor(k, 3, "k")
    v = as_tensor(v, 3, "v")
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(
            f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    l, h, d = q.shape
    scale = 1.0 / math.sqrt(d)
    out = np.empty((l, h, d), dtype=np.float64)
    for hi in range(h):
        qh = np.ascontiguousarray(q[:, hi, :])
        kh = np.ascontiguousarray(k[:, hi, :])
        vh = np.ascontiguousarray(v[:, hi, :])
        out[:, hi, :] = kernels.naive_attention_head(qh, kh, vh, scale)
    return out


def attention_with_lse(q, k, v, causal):
    """Scaled dot-product attention returning per-query log-sum-exp.

    q: (b, m, h, d); k, v: (b, n, h, d). With causal=True the m queries
    are the last m positions of the n-long sequence: query t attends keys
    0..(n - m + t). With causal=False every query attends all n keys.
    """
    q = as_tensor(q, 4, "q")
    k = as_tensor(k, 4, "k")
    v = as_tensor(v, 4, "v")
    b, m, h, d = q.shape
    if k.shape != v.shape:
        raise DimensionError(f"k/v shapes differ: {k.shape} vs {v.shape}")
    if k.shape[0] != b or k.shape[2] != h or k.shape[3] != d:
        raise DimensionError(f"k {k.shape} incompatible with q {q.shape}")
    n = k.shape[1]
    if n < 1:
        raise ContractError("attention requires at least one key")
    if causal and n < m:
        raise ContractError(
            f"causal attention needs n >= m, got n={n}, m={m}")
    scale = 1.0 / math.sqrt(d)
    out = np.empty((b, m, h, d), dtype=np.float64)
    lse = np.empty((b, m, h), dtype=np.float64)
    if causal:
        lens = np.arange(n - m + 1, n + 1, dtype=np.int64)
    for bi in range(b):
        for hi in range(h):
            qh = np.ascontiguousarray(q[bi, :, hi, :])
            kh = np.ascontiguousarray(k[bi, :, hi, :])
            vht = np.ascontiguousarray(v[bi, :, hi, :].T)
            scores = kernels.matmul_nt(qh, kh) * scale
            if causal:
                probs, lse_row = kernels.softmax_lse_prefix(scores, lens)
            else:
                probs, lse_row = kernels.softmax_lse_rows(scores)
            out[bi, :, hi, :] = kernels.matmul_nt(probs, vht)
            lse[bi, :, hi] = lse_row
    return LseAttentionOutput(output=out, lse=lse)


def relay_fusion(o_sys, lse_sys, o_ctx, lse_ctx):
    """Convex combination of segment outputs weighted by lse differences.

    alpha_sys = 1 / (1 + exp(lse_ctx - lse_sys)) per (request, query,
    head); the context weight is exactly 1 - alpha_sys. Computed in
    float64 regardless of storage precision.
    """
    o_sys = as_tensor(o_sys, 4, "o_sys")
    o_ctx = as_tensor(o_ctx, 4, "o_ctx")
    lse_sys = as_tensor(lse_sys, 3, "lse_sys")
    lse_ctx = as_tensor(lse_ctx, 3, "lse_ctx")
    if o_sys.shape != o_ctx.shape:
        raise DimensionError(
            f"output shapes differ: {o_sys.shape} vs {o_ctx.shape}")
    if lse_sys.shape != lse_ctx.shape or lse_sys.shape != o_sys.shape[:3]:
        raise DimensionError("lse shapes must match output batch/query/head dims")
    with np.errstate(over="ignore"):
        alpha_sys = 1.0 / (1.0 + np.exp(lse_ctx - lse_sys))
    alpha_ctx = 1.0 - alpha_sys
    a = alpha_sys[..., None]
    return o_sys * a + o_ctx * alpha_ctx[..., None]


def _context_attention(q_list, ctx_k, ctx_v, counter):
    """Per-request causal attention over the request's own context."""
    outs, lses = [], []
    for qr, kr, vr in zip(q_list, ctx_k, ctx_v):
        m = qr.shape[0]
        res = attention_with_lse(qr[None], kr[None], vr[None], causal=True)
        outs.append(res.output[0])
        lses.append(res.lse[0])
        if counter is not None:
            hd = qr.shape[1] * qr.shape[2]
            counter.add_load(m * hd)              # queries
            counter.add_load(kr.shape[0] * hd)    # context KV pairs
            counter.add_store(m * hd)             # partial output
            counter.add_lse(m * qr.shape[1])
    return outs, lses


def _system_attention(q_list, sys_k, sys_v, counter):
    """One unmasked pass over the shared system KVs for all queries.

    Queries from every request are flattened into a single batch-1 call,
    so the system KVs are read exactly once regardless of batch size.
    """
    q_flat = np.concatenate(q_list, axis=0)  # (total_m, h, d)
    res = attention_with_lse(
        q_flat[None], sys_k[None], sys_v[None], causal=False)
    if counter is not None:
        total_m, h, d = q_flat.shape
        hd = h * d
        counter.add_load(total_m * hd)            # queries, second read
        counter.add_load(sys_k.shape[0] * hd)     # system KV pairs, once
        counter.add_store(total_m * hd)           # partial output
        counter.add_lse(total_m * h)
    outs, lses = [], []
    row = 0
    for qr in q_list:
        m = qr.shape[0]
        outs.append(res.output[0, row:row + m])
        lses.append(res.lse[0, row:row + m])
        row += m
    return outs, lses


def relay_attention_ragged(q_list, sys_k, sys_v, ctx_k, ctx_v,
                           counter=None, system_first=False):
    """Relay attention for requests with possibly different query counts.

    q_list[r]: (m_r, h, d); ctx_k[r]/ctx_v[r]: (c_r, h, d) including the
    current input tokens; sys_k/sys_v: (s, h, d), s >= 1. Returns a list
    of (m_r, h, d) outputs. The result equals causal attention over
    [system || context] per request. system_first only changes evaluation
    order; the two segments are independent, so the fused output is
    bitwise-identical either way.
    """
    sys_k = as_tensor(sys_k, 3, "sys_k")
    sys_v = as_tensor(sys_v, 3, "sys_v")
    if sys_k.shape != sys_v.shape:
        raise DimensionError(
            f"sys_k/sys_v shapes differ: {sys_k.shape} vs {sys_v.shape}")
    if sys_k.shape[0] < 1:
        raise ContractError(
            "relay attention requires a non-empty system segment; "
            "use the baseline path when there is no shared prefix")
    if not (len(q_list) == len(ctx_k) == len(ctx_v)):
        raise DimensionError("one context k/v pair required per request")
    q_list = [as_tensor(qr, 3, "q") for qr in q_list]
    ctx_k = [as_tensor(kr, 3, "ctx_k") for kr in ctx_k]
    ctx_v = [as_tensor(vr, 3, "ctx_v") for vr in ctx_v]
    if system_first:
        o_sys, lse_sys = _system_attention(q_list, sys_k, sys_v, counter)
        o_ctx, lse_ctx = _context_attention(q_list, ctx_k, ctx_v, counter)
    else:
        o_ctx, lse_ctx = _context_attention(q_list, ctx_k, ctx_v, counter)
        o_sys, lse_sys = _system_attention(q_list, sys_k, sys_v, counter)
    fused = []
    for os_r, ls_r, oc_r, lc_r in zip(o_sys, lse_sys, o_ctx, lse_ctx):
        fused.append(relay_fusion(
            os_r[None], ls_r[None], oc_r[None], lc_r[None])[0])
        if counter is not None:
            m, h, d = os_r.shape
            counter.add_load(2 * m * h * d)       # both partial outputs
            counter.add_store(m * h * d)          # fused output
            counter.add_lse(2 * m * h)
    return fused


def relay_attention(q, sys_k, sys_v, ctx_k, ctx_v,
                    counter=None, system_first=False):
    """Relay attention for a uniform batch.

    q: (b, m, h, d); sys_k/sys_v: (s, h, d) shared by the batch;
    ctx_k[r]/ctx_v[r]: (c_r, h, d) per request, current tokens included.
    Equals causal attention over [system || context] per request, with the
    system KVs read once per batch.
    """
    q = as_tensor(q, 4, "q")
    b = q.shape[0]
    if len(ctx_k) != b or len(ctx_v) != b:
        raise DimensionError(
            f"expected {b} context caches, got {len(ctx_k)}/{len(ctx_v)}")
    outs = relay_attention_ragged(
        [q[r] for r in range(b)], sys_k, sys_v, ctx_k, ctx_v,
        counter=counter, system_first=system_first)
    return np.stack(outs, axis=0)


def baseline_attention_ragged(q_list, full_k, full_v, counter=None):
    """Baseline per-request causal attention over each full cache.

    full_k[r]/full_v[r]: (len_r, h, d), the request's entire cached
    sequence (shared prefix replicated per request), current tokens
    included. Returns a list of (m_r, h, d) outputs.
    """
    if not (len(q_list) == len(full_k) == len(full_v)):
        raise DimensionError("one k/v pair required per request")
    outs = []
    for qr, kr, vr in zip(q_list, full_k, full_v):
        qr = as_tensor(qr, 3, "q")
        kr = as_tensor(kr, 3, "k")
        vr = as_tensor(vr, 3, "v")
        res = attention_with_lse(qr[None], kr[None], vr[None], causal=True)
        outs.append(res.output[0])
        if counter is not None:
            m, h, d = qr.shape
            hd = h * d
            counter.add_load(m * hd)              # queries
            counter.add_load(kr.shape[0] * hd)    # cached KV pairs
            counter.add_store(m * hd)             # output
    return outs


def baseline_attention(q, full_k, full_v, counter=None):
    """Baseline attention for a uniform batch; see baseline_attention_ragged."""
    q = as_tensor(q, 4, "q")
    outs = baseline_attention_ragged(
        [q[r] for r in range(q.shape[0])], full_k, full_v, counter=counter)
    return np.stack(outs, axis=0)
