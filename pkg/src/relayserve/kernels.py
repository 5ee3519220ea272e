"""Kernel backend selection.

The hot loops (dense matmul, row softmax with log-sum-exp, rotary rotation,
brute-force attention) exist twice: a compiled Cython extension and a
pure-Python twin with identical operation order. The compiled backend is
preferred when present. Set RELAYSERVE_BACKEND=pure to force the fallback,
or RELAYSERVE_BACKEND=compiled to fail loudly if the extension is missing.
"""

import os

from relayserve.errors import ConfigurationError

_requested = os.environ.get("RELAYSERVE_BACKEND", "auto").strip().lower()

if _requested in ("auto", ""):
    try:
        from relayserve import _kernels_cy as _impl
        BACKEND = "compiled"
    except ImportError:
        from relayserve import _kernels_py as _impl
        BACKEND = "pure-python"
elif _requested in ("pure", "python", "pure-python"):
    from relayserve import _kernels_py as _impl
    BACKEND = "pure-python"
elif _requested == "compiled":
    from relayserve import _kernels_cy as _impl
    BACKEND = "compiled"
else:
    raise ConfigurationError(
        f"RELAYSERVE_BACKEND={_requested!r}: expected auto, pure or compiled")

matmul_nt = _impl.matmul_nt
softmax_lse_rows = _impl.softmax_lse_rows
softmax_lse_prefix = _impl.softmax_lse_prefix
rope_rows = _impl.rope_rows
naive_attention_head = _impl.naive_attention_head
