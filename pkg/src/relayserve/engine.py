"""Execution engines driven by the scheduler.

ModelEngine runs the toy transformer for real (honest tokens, measured
wall time, instrumented traffic); SimulatedEngine advances request
bookkeeping only and reports analytic traffic/flops, which makes
production-scale prefix lengths tractable and step costs deterministic. Both
expose the same stepping surface, so the serving loop does not care which
one it drives.

Analytic element counts follow the attention instrumentation convention
exactly (queries/outputs cost d per token, an attended position costs d
for its KV pair, fusion moves 3d per token, d = heads * head_dim); for a
uniform decode step they reduce to the cost model's closed forms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from relayserve.attention import TrafficCounter
from relayserve.costmodel import HardwareProfile, roofline_time
from relayserve.errors import ConfigurationError
from relayserve.kvcache import (DEFAULT_BLOCK_SIZE, BlockPool, PagedKvCache,
                                context_position)
from relayserve.model import DecoderModel, ModelConfig


@dataclass
class StepResult:
    """Outcome of one engine step over a batch."""

    kind: str                      # "prompt" | "decode"
    tokens: dict                   # request id -> emitted token id
    attn_elements: int             # attention traffic, counter convention
    cost_elements: int             # attention + weight traffic
    flops: float
    wall_s: float


def attention_step_elements(mode, s, new_tokens, cache_lens, d):
    """Per-layer attention traffic of one step.

    new_tokens[r] is the number of input tokens of request r this step,
    cache_lens[r] its context length after appending them. Baseline caches
    contain the replicated prefix, relay caches do not; the shared system
    KVs are charged once per step in relay mode.
    """
    if mode == "baseline":
        return d * sum(c + 2 * m for m, c in zip(new_tokens, cache_lens))
    return d * (s + sum(cache_lens) + 7 * sum(new_tokens))


def weight_elements(config: ModelConfig):
    """Elements of model weights read once per step."""
    dm, ffn = config.model_dim, config.ffn_dim
    per_layer = 4 * dm * dm + 2 * dm * ffn + 2 * dm
    return config.layers * per_layer + config.vocab_size * dm + dm


def step_flops(config: ModelConfig, new_tokens, attended_lens):
    """Approximate floating operations of one step (both modes attend the
    same positions, so the count is mode-independent)."""
    dm, ffn = config.model_dim, config.ffn_dim
    n = sum(new_tokens)
    attn = sum(4 * m * l * dm for m, l in zip(new_tokens, attended_lens))
    per_layer = 8 * n * dm * dm + 4 * n * dm * ffn + attn
    head = 2 * len(new_tokens) * dm * config.vocab_size
    return float(config.layers * per_layer + head)


def analytic_cost(profile: HardwareProfile):
    """Step-cost function: roofline time of the step's analytic counts."""

    def cost(result: StepResult) -> float:
        return roofline_time(result.flops, result.cost_elements, profile)

    return cost


def wallclock_cost(result: StepResult) -> float:
    """Step-cost function: the measured wall time of the step."""
    return result.wall_s


class ModelEngine:
    """Drives a DecoderModel with scheduler-managed request lifecycles."""

    def __init__(self, model: DecoderModel, mode, system_tokens,
                 pool_blocks, block_size=DEFAULT_BLOCK_SIZE):
        if mode not in ("baseline", "relay"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        system_tokens = list(system_tokens)
        if mode == "relay" and len(system_tokens) < 1:
            raise ConfigurationError(
                "relay mode requires a system prompt of length >= 1")
        self.model = model
        self.mode = mode
        self.system_tokens = system_tokens
        self.system_len = len(system_tokens)
        self.sys_cache = (model.prefill_system_cache(system_tokens)
                          if mode == "relay" else None)
        cfg = model.config
        dtype = np.float32 if cfg.precision == "float32" else np.float64
        self.ctx_cache = PagedKvCache(cfg.layers, cfg.heads, cfg.head_dim,
                                      pool_blocks, block_size, dtype=dtype)
        self.counter = TrafficCounter()  # reset at the start of each step
        self._last_token: dict = {}
        self._reserved: dict = {}

    @property
    def config(self):
        return self.model.config

    @property
    def free_blocks(self):
        return self.ctx_cache.pool.free_blocks

    @property
    def total_blocks(self):
        return self.ctx_cache.pool.num_blocks

    @property
    def reserved_blocks(self):
        return sum(self._reserved.values())

    def blocks_needed(self, request):
        """Worst-case blocks if the request decodes to its cap."""
        prefix = self.system_len if self.mode == "baseline" else 0
        tokens = prefix + request.user_len + request.max_gen - 1
        return self.ctx_cache.pool.blocks_for(tokens)

    def start_request(self, request):
        self.ctx_cache.register(request.id)
        self._reserved[request.id] = self.blocks_needed(request)

    def finish_request(self, request):
        self._last_token.pop(request.id, None)
        self._reserved.pop(request.id, None)
        return self.ctx_cache.release(request.id)

    def prompt_step(self, requests):
        s = self.system_len
        inputs = []
        for req in requests:
            if self.mode == "baseline":
                toks = self.system_tokens + list(req.user_tokens)
                pos = np.arange(len(toks))
            else:
                toks = list(req.user_tokens)
                pos = np.asarray([context_position(i, s)
                                  for i in range(len(toks))])
            inputs.append((req.id, toks, pos))
        return self._run(inputs, requests, "prompt")

    def decode_step(self, requests):
        s = self.system_len
        inputs = []
        for req in requests:
            clen = self.ctx_cache.length(req.id)
            pos = clen if self.mode == "baseline" else context_position(clen, s)
            inputs.append((req.id, [self._last_token[req.id]], [pos]))
        return self._run(inputs, requests, "decode")

    def _run(self, inputs, requests, kind):
        self.counter.reset()  # per-step counts
        t0 = time.perf_counter()
        logits = self.model.forward_step(inputs, self.mode, self.ctx_cache,
                                         self.sys_cache, self.counter)
        wall = time.perf_counter() - t0
        tokens = {}
        for req, row in zip(requests, np.argmax(logits, axis=1)):
            tokens[req.id] = int(row)
            self._last_token[req.id] = int(row)
        attn = self.counter.elements_read
        new_tokens = [len(ti) for _, ti, _ in inputs]
        cache_lens = [self.ctx_cache.length(req.id) for req in requests]
        attended = [c + (self.system_len if self.mode == "relay" else 0)
                    for c in cache_lens]
        flops = step_flops(self.config, new_tokens, attended)
        cost_elements = attn + weight_elements(self.config)
        return StepResult(kind=kind, tokens=tokens, attn_elements=attn,
                          cost_elements=cost_elements, flops=flops,
                          wall_s=wall)


@dataclass
class _SimState:
    context_len: int = 0


class SimulatedEngine:
    """Bookkeeping-only engine: real block accounting, analytic traffic.

    Emits a fixed placeholder token (never the end token), so simulated
    requests always run to their generation cap.
    """

    def __init__(self, config: ModelConfig, mode, system_len,
                 pool_blocks, block_size=DEFAULT_BLOCK_SIZE):
        if mode not in ("baseline", "relay"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        if mode == "relay" and system_len < 1:
            raise ConfigurationError(
                "relay mode requires a system prompt of length >= 1")
        self.config = config
        self.mode = mode
        self.system_len = system_len
        self.pool = BlockPool(pool_blocks, block_size)
        self._states: dict = {}
        self._reserved: dict = {}

    @property
    def free_blocks(self):
        return self.pool.free_blocks

    @property
    def total_blocks(self):
        return self.pool.num_blocks

    @property
    def reserved_blocks(self):
        return sum(self._reserved.values())

    def blocks_needed(self, request):
        prefix = self.system_len if self.mode == "baseline" else 0
        tokens = prefix + request.user_len + request.max_gen - 1
        return self.pool.blocks_for(tokens)

    def start_request(self, request):
        self.pool.register(request.id)
        self._states[request.id] = _SimState()
        self._reserved[request.id] = self.blocks_needed(request)

    def finish_request(self, request):
        self._states.pop(request.id, None)
        self._reserved.pop(request.id, None)
        return self.pool.release(request.id)

    def prompt_step(self, requests):
        new_tokens, cache_lens = [], []
        for req in requests:
            m = req.user_len + (self.system_len if self.mode == "baseline" else 0)
            self.pool.grow(req.id, m)
            self._states[req.id].context_len += m
            new_tokens.append(m)
            cache_lens.append(self._states[req.id].context_len)
        return self._result("prompt", requests, new_tokens, cache_lens)

    def decode_step(self, requests):
        new_tokens, cache_lens = [], []
        for req in requests:
            self.pool.grow(req.id, 1)
            self._states[req.id].context_len += 1
            new_tokens.append(1)
            cache_lens.append(self._states[req.id].context_len)
        return self._result("decode", requests, new_tokens, cache_lens)

    def _result(self, kind, requests, new_tokens, cache_lens):
        d = self.config.model_dim
        attn = self.config.layers * attention_step_elements(
            self.mode, self.system_len, new_tokens, cache_lens, d)
        attended = [c + (self.system_len if self.mode == "relay" else 0)
                    for c in cache_lens]
        flops = step_flops(self.config, new_tokens, attended)
        tokens = {req.id: 1 for req in requests}
        return StepResult(kind=kind, tokens=tokens, attn_elements=attn,
                          cost_elements=attn + weight_elements(self.config),
                          flops=flops, wall_s=0.0)
