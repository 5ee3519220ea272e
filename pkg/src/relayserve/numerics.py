"""Deterministic dense-tensor primitives.

Tensors are C-contiguous float64 numpy arrays (row-major; an opt-in
float32 storage mode exists at the model layer, arithmetic stays float64).
Every reduction runs in a fixed sequential order, so repeated calls with
identical inputs are bitwise-identical, and every public operation
validates that its result is finite. All operations are pure functions on
immutable inputs and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relayserve import kernels
from relayserve.errors import DimensionError, NonFiniteError

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class GemmShape:
    """Problem size of C = A @ B.T with A (m, k) and B (n, k)."""

    m: int
    n: int
    k: int

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise DimensionError(f"GemmShape dimensions must be >= 1, got {self}")


def as_tensor(x, ndim=None, name="tensor"):
    """Coerce to a C-contiguous float64 array, optionally checking rank."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    return arr


def check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return arr


def matmul(a, b_transposed):
    """Dense product C = A @ B.T with sequential accumulation over k.

    Two calls with identical inputs return bitwise-identical results.
    """
    a = as_tensor(a, 2, "a")
    b = as_tensor(b_transposed, 2, "b_transposed")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"inner dimensions differ: a is {a.shape}, b_transposed is {b.shape}")
    check_finite(a, "matmul input a")
    check_finite(b, "matmul input b_transposed")
    return check_finite(kernels.matmul_nt(a, b), "matmul output")


def softmax_lse(logits):
    """Row-wise softmax with the log-sum-exp of each row.

    Per row: lse = max(x) + log(sum(exp(x - max(x)))), probs_j =
    exp(x_j - lse). Rows sum to 1 and lse is shift-equivariant.
    """
    x = as_tensor(logits, 2, "logits")
    if x.shape[1] < 1:
        raise DimensionError("softmax_lse: rows must have at least one column")
    check_finite(x, "softmax_lse input")
    probs, lse = kernels.softmax_lse_rows(x)
    check_finite(probs, "softmax_lse probs")
    check_finite(lse, "softmax_lse lse")
    return probs, lse


def rope_apply(vec, position):
    """Rotate consecutive pairs of a vector by position * base^(-2i/d).

    base = 10000; position 0 is the identity. Preserves Euclidean norm.
    """
    v = as_tensor(vec, 1, "vec")
    d = v.shape[0]
    if d % 2 != 0:
        raise DimensionError(f"rope_apply requires even dimension, got {d}")
    if position < 0:
        raise DimensionError(f"rope_apply requires position >= 0, got {position}")
    check_finite(v, "rope_apply input")
    pos = np.asarray([position], dtype=np.int64)
    out = kernels.rope_rows(v.reshape(1, d), pos, ROPE_BASE)
    return check_finite(out[0], "rope_apply output")


def rope_rows(x, positions):
    """Batched rotary application: row i rotated to positions[i]."""
    x = as_tensor(x, 2, "x")
    if x.shape[1] % 2 != 0:
        raise DimensionError(f"rope_rows requires even dimension, got {x.shape[1]}")
    pos = np.ascontiguousarray(positions, dtype=np.int64)
    if pos.ndim != 1 or pos.shape[0] != x.shape[0]:
        raise DimensionError("rope_rows: positions must be one per row")
    if (pos < 0).any():
        raise DimensionError("rope_rows: positions must be >= 0")
    return kernels.rope_rows(x, pos, ROPE_BASE)
