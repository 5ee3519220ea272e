"""Analytical performance layer: arithmetic intensity, the memory-bound
criterion, per-step element-traffic counts for both attention paths, and
the resulting theoretical speedup.

Element counts are exact integers using the convention shared with the
attention instrumentation: query and output vectors cost d elements each
(d = heads * head_dim), an attended token position costs d for its
key/value pair, and relay fusion moves both partial outputs plus the final
one (3bd in total). Log-sum-exp scalars are excluded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from relayserve.errors import ContractError
from relayserve.numerics import GemmShape


@dataclass(frozen=True)
class HardwareProfile:
    """Bandwidth/compute envelope of one accelerator."""

    name: str
    mem_bandwidth: float  # bytes / s
    peak_flops: float     # flop / s
    bytes_per_element: int = 2  # half precision

    def __post_init__(self):
        if min(self.mem_bandwidth, self.peak_flops, self.bytes_per_element) <= 0:
            raise ContractError(f"profile fields must be positive: {self}")


HARDWARE_PROFILES = {
    "A40": HardwareProfile("A40", 696e9, 37.4e12),
    "A100-PCIE-40GB": HardwareProfile("A100-PCIE-40GB", 1555e9, 77.9e12),
    "A100-SXM4-80GB": HardwareProfile("A100-SXM4-80GB", 2039e9, 77.9e12),
}


@dataclass(frozen=True)
class TrafficReport:
    """Closed-form traffic of one decode step under both paths."""

    n_baseline: int
    n_relay: int
    speedup: float
    b: int
    s: int
    c: int
    d: int


def arithmetic_intensity_gemm(shape: GemmShape) -> float:
    """flops/byte of C = A @ B.T at 2 bytes per element:
    2mnk / (2(mk + nk + mn)). Always below min(m, n, k)."""
    m, n, k = shape.m, shape.n, shape.k
    return (2.0 * m * n * k) / (2.0 * (m * k + n * k + m * n))


def gemm_intensity_bound(shape: GemmShape) -> int:
    """Strict upper bound on the GEMM arithmetic intensity."""
    return min(shape.m, shape.n, shape.k)


def balance_ratio(profile: HardwareProfile) -> float:
    """flops/byte a kernel must exceed to saturate compute; below it the
    operator is memory-bound."""
    return profile.peak_flops / profile.mem_bandwidth


def compute_time_ratio(intensity: float, profile: HardwareProfile) -> float:
    """r = intensity * t_c / t_m, compute time over memory time for a
    perfectly overlapped operator; r < 1 means memory-bound."""
    t_c = 1.0 / profile.peak_flops
    t_m = 1.0 / profile.mem_bandwidth
    return intensity * (t_c / t_m)


def is_memory_bound(intensity: float, profile: HardwareProfile) -> bool:
    return compute_time_ratio(intensity, profile) < 1.0


def traffic_baseline(b: int, s: int, c: int, d: int) -> int:
    """Elements moved in one baseline decode step for a batch of b
    requests: queries bd + cached KVs b(s+c)d + outputs bd."""
    _check_params(b, s, c, d)
    return b * d * (s + c + 2)


def traffic_relay(b: int, s: int, c: int, d: int) -> int:
    """Elements moved in one relay decode step: system attention
    (bd + sd + bd) + context attention (bd + bcd + bd) + fusion 3bd."""
    _check_params(b, s, c, d)
    return d * (s + b * c + 7 * b)


def _check_params(b, s, c, d):
    if b < 1 or d < 1 or s < 0 or c < 0:
        raise ContractError(
            f"need b >= 1, d >= 1, s >= 0, c >= 0; got b={b} s={s} c={c} d={d}")


def theoretical_speedup(b: int, s: int, c: int) -> float:
    """p = (s + c + 2) / (s/b + c + 7): baseline over relay traffic.

    Strictly increasing in s, approaches b as s grows, and is below 1 at
    b = 1 (the relay path only pays off for batched inference).
    """
    _check_params(b, s, c, 1)
    return (s + c + 2) / (s / b + c + 7)


def traffic_report(b: int, s: int, c: int, d: int) -> TrafficReport:
    nb = traffic_baseline(b, s, c, d)
    nr = traffic_relay(b, s, c, d)
    return TrafficReport(n_baseline=nb, n_relay=nr, speedup=nb / nr,
                         b=b, s=s, c=c, d=d)


def memory_time(elements: int, profile: HardwareProfile) -> float:
    """Seconds to move the given element count at full bandwidth."""
    return elements * profile.bytes_per_element / profile.mem_bandwidth


def compute_time(flops: float, profile: HardwareProfile) -> float:
    return flops / profile.peak_flops


def roofline_time(flops: float, elements: int,
                  profile: HardwareProfile) -> float:
    """Runtime of a perfectly overlapped operator: the larger of its
    memory time and compute time."""
    return max(memory_time(elements, profile), compute_time(flops, profile))


def emit_speedup_curves(path, batch_sizes=(4, 8, 16, 32),
                        context_lens=(128, 256),
                        s_values=(64, 128, 256, 512, 1024, 2048, 4096),
                        measured=None):
    """Write the theoretical speedup grid as CSV.

    One row per (b, c, s) with columns b, c, s, p_theoretical,
    p_measured_traffic. measured, if given, is called as measured(b, c, s)
    and should return the instrumented baseline/relay traffic ratio; the
    column is left empty otherwise. Returns the written rows.
    """
    rows = []
    for b in batch_sizes:
        for c in context_lens:
            for s in s_values:
                p = theoretical_speedup(b, s, c)
                pm = "" if measured is None else repr(measured(b, c, s))
                rows.append({"b": b, "c": c, "s": s,
                             "p_theoretical": repr(p),
                             "p_measured_traffic": pm})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["b", "c", "s", "p_theoretical",
                           "p_measured_traffic"])
        writer.writeheader()
        writer.writerows(rows)
    return rows
