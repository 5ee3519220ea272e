"""relayserve: desk-scale transformer inference engine and serving simulator.

Implements two execution paths for batches of requests that share a system
prompt: a baseline that replicates the shared prefix into every request's
KV cache, and a relay path that stores the prefix once and reads it once
per batch, fusing per-segment attention outputs through their log-sum-exp
values. An analytic memory-traffic model predicts the speedup.
"""

__version__ = "0.1.0"

__all__ = [
    "DecoderModel", "ModelConfig", "ModelEngine", "SimulatedEngine",
    "Request", "SchedulerConfig", "attention_with_lse", "kernel_backend",
    "naive_causal_attention", "relay_attention", "relay_fusion",
    "run_batch_job", "run_interactive_sim", "theoretical_speedup",
]


def kernel_backend():
    """Name of the active kernel backend: 'compiled' or 'pure-python'."""
    from relayserve.kernels import BACKEND
    return BACKEND


def __getattr__(name):
    # lazy re-exports; keeps `import relayserve` cheap
    if name in ("naive_causal_attention", "attention_with_lse",
                "relay_fusion", "relay_attention"):
        from relayserve import attention
        return getattr(attention, name)
    if name in ("DecoderModel", "ModelConfig"):
        from relayserve import model
        return getattr(model, name)
    if name in ("ModelEngine", "SimulatedEngine"):
        from relayserve import engine
        return getattr(engine, name)
    if name in ("Request", "SchedulerConfig", "run_batch_job",
                "run_interactive_sim"):
        from relayserve import serving
        return getattr(serving, name)
    if name == "theoretical_speedup":
        from relayserve.costmodel import theoretical_speedup
        return theoretical_speedup
    raise AttributeError(f"module 'relayserve' has no attribute {name!r}")
