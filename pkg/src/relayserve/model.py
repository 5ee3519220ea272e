"""Decoder-only toy transformer with seeded random weights.

Two execution paths over the same weights: baseline mode replicates the
shared system prompt into every request's context cache and runs plain
causal attention; relay mode keeps the system KVs in a separate shared
cache filled before serving, attends the two segments independently, and
fuses them through their log-sum-exp values. Greedy decoding only; the two
paths must emit identical token sequences.

Architecture: pre-norm RMS normalization, rotary positions (context token
positions are offset by the prefix length in relay mode), a two-layer MLP
with a SiLU gate, untied output head. Weights are a pure function of
(config, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from relayserve import kernels
from relayserve.attention import (TrafficCounter, attention_with_lse,
                                  baseline_attention_ragged,
                                  relay_attention_ragged)
from relayserve.errors import (ConfigurationError, ContractError,
                               DimensionError)
from relayserve.kvcache import (DEFAULT_BLOCK_SIZE, PagedKvCache,
                                SystemKvCache, context_position)

END_TOKEN = 0
WEIGHT_SCALE = 0.02
_NORM_EPS = 1e-6

_WEIGHTS_MAGIC = b"RELAYWT\x00"
_WEIGHTS_VERSION = 1

CONFIG_KEYS = ("layers", "heads", "head_dim", "ffn_dim", "vocab_size",
               "precision", "seed")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    vocab_size: int = 256
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if min(self.layers, self.heads, self.head_dim, self.ffn_dim,
               self.vocab_size) < 1:
            raise ConfigurationError(f"all dimensions must be >= 1: {self}")
        if self.head_dim % 2 != 0:
            raise ConfigurationError(
                f"head_dim must be even for rotary positions, got {self.head_dim}")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(
                f"precision must be float64 or float32, got {self.precision!r}")

    @property
    def model_dim(self):
        return self.heads * self.head_dim


def load_model_config(path):
    """Parse a key=value model config file (keys: layers, heads, head_dim,
    ffn_dim, vocab_size, precision, seed; '#' starts a comment)."""
    values = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{ln}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigurationError(f"{path}:{ln}: unknown key {key!r}")
            values[key] = val if key == "precision" else int(val)
    return ModelConfig(**values)


def save_model_config(config: ModelConfig, path):
    with open(path, "w") as f:
        for key in CONFIG_KEYS:
            f.write(f"{key} = {getattr(config, key)}\n")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class DecoderWeights:
    embedding: np.ndarray
    layers: list
    final_norm: np.ndarray
    head: np.ndarray


def init_weights(config: ModelConfig) -> DecoderWeights:
    """Seeded random weights, bitwise-reproducible for a fixed seed.

    Projection and embedding entries are N(0, 0.02^2); norm gains start at
    1 (near-zero gains would collapse the network into degenerate
    near-tied logits). Draw order: embedding, then per layer wq, wk, wv,
    wo, w_up, w_down, then the output head. Matrices are stored as
    (out_dim, in_dim) so y = x @ W.T.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dm, ffn, vocab = config.model_dim, config.ffn_dim, config.vocab_size
    round_ = _storage_rounder(config)

    def draw(out_dim, in_dim):
        return round_(rng.standard_normal((out_dim, in_dim)) * WEIGHT_SCALE)

    embedding = draw(vocab, dm)
    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            attn_norm=np.ones(dm),
            wq=draw(dm, dm), wk=draw(dm, dm), wv=draw(dm, dm), wo=draw(dm, dm),
            mlp_norm=np.ones(dm),
            w_up=draw(ffn, dm), w_down=draw(dm, ffn)))
    head = draw(vocab, dm)
    return DecoderWeights(embedding=embedding, layers=layers,
                          final_norm=np.ones(dm), head=head)


def _storage_rounder(config):
    if config.precision == "float32":
        return lambda x: x.astype(np.float32).astype(np.float64)
    return lambda x: x


def _weight_arrays(weights: DecoderWeights):
    yield weights.embedding
    for lw in weights.layers:
        for arr in (lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo,
                    lw.mlp_norm, lw.w_up, lw.w_down):
            yield arr
    yield weights.final_norm
    yield weights.head


def save_weights(config: ModelConfig, weights: DecoderWeights, path):
    """Persist weights in the same flat binary container style as the
    system KV cache: header then arrays in draw order, little-endian."""
    precision_bits = 32 if config.precision == "float32" else 64
    header = _WEIGHTS_MAGIC + struct.pack(
        "<IIIIIIIq", _WEIGHTS_VERSION, config.layers, config.heads,
        config.head_dim, config.ffn_dim, config.vocab_size, precision_bits,
        config.seed)
    with open(path, "wb") as f:
        f.write(header)
        for arr in _weight_arrays(weights):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path):
    """Read a weights file; returns (ModelConfig, DecoderWeights)."""
    with open(path, "rb") as f:
        if f.read(len(_WEIGHTS_MAGIC)) != _WEIGHTS_MAGIC:
            raise ConfigurationError(f"{path}: not a weights file")
        (version, layers, heads, head_dim, ffn_dim, vocab, bits,
         seed) = struct.unpack("<IIIIIIIq", f.read(36))
        if version != _WEIGHTS_VERSION:
            raise ConfigurationError(f"{path}: unsupported version {version}")
        config = ModelConfig(layers=layers, heads=heads, head_dim=head_dim,
                             ffn_dim=ffn_dim, vocab_size=vocab,
                             precision="float32" if bits == 32 else "float64",
                             seed=seed)
        dm = config.model_dim

        def read(shape):
            n = int(np.prod(shape))
            return np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape).copy()

        embedding = read((vocab, dm))
        lws = []
        for _ in range(layers):
            lws.append(LayerWeights(
                attn_norm=read((dm,)), wq=read((dm, dm)), wk=read((dm, dm)),
                wv=read((dm, dm)), wo=read((dm, dm)), mlp_norm=read((dm,)),
                w_up=read((ffn_dim, dm)), w_down=read((dm, ffn_dim))))
        weights = DecoderWeights(embedding=embedding, layers=lws,
                                 final_norm=read((dm,)), head=read((vocab, dm)))
    return config, weights


def _rmsnorm(x, gain):
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return (x / rms) * gain


def _silu(x):
    return x / (1.0 + np.exp(-x))


@dataclass
class GenerationRequestState:
    """Lifecycle of one request inside a generation batch."""

    request_id: str
    prompt_tokens: list
    phase: str = "prompt"  # "prompt" -> "autoregressive", exactly once
    emitted: list = field(default_factory=list)
    finished: bool = False

    @property
    def last_token(self):
        return self.emitted[-1] if self.emitted else None


@dataclass
class GenerationBatch:
    """A batch of requests advancing in lockstep through one model."""

    mode: str
    states: list
    ctx_cache: PagedKvCache
    system_tokens: list
    sys_cache: SystemKvCache | None

    @property
    def system_len(self):
        """Position offset for context tokens; the authoritative source is
        the prefilled cache when one exists."""
        if self.sys_cache is not None:
            return self.sys_cache.system_len
        return len(self.system_tokens)

    @property
    def active(self):
        return [st for st in self.states if not st.finished]


class DecoderModel:
    """Config + weights + the two attention execution paths."""

    def __init__(self, config: ModelConfig, weights: DecoderWeights = None):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config)
        self._round = _storage_rounder(config)

    # ------------------------------------------------------------------
    # core forward pass

    def forward_step(self, inputs, mode, ctx_cache=None, sys_cache=None,
                     counter: TrafficCounter = None):
        """Advance every request by its new tokens; return last-position logits.

        inputs: list of (request_id, token_ids, positions) with token_ids
        and positions of equal length per request (1 in the autoregressive
        phase). mode: 'baseline' | 'relay' | 'prefill'. Returns a (b,
        vocab) array of logits at each request's final position; 'prefill'
        additionally returns the collected per-layer KVs.
        """
        cfg, w = self.config, self.weights
        h, dh, dm = cfg.heads, cfg.head_dim, cfg.model_dim
        token_ids = [np.asarray(ti, dtype=np.int64) for _, ti, _ in inputs]
        positions = [np.asarray(pi, dtype=np.int64) for _, _, pi in inputs]
        counts = [len(t) for t in token_ids]
        toks = np.concatenate(token_ids)
        pos = np.concatenate(positions)
        if (toks < 0).any() or (toks >= cfg.vocab_size).any():
            raise ContractError("token id outside vocabulary")
        n = toks.shape[0]
        bounds = np.cumsum(counts)
        pos_per_head = np.repeat(pos, h)

        x = w.embedding[toks]
        collected = [] if mode == "prefill" else None
        for li, lw in enumerate(w.layers):
            xn = _rmsnorm(x, lw.attn_norm)
            xn = np.ascontiguousarray(xn)
            q = kernels.matmul_nt(xn, lw.wq)
            k = kernels.matmul_nt(xn, lw.wk)
            v = kernels.matmul_nt(xn, lw.wv)
            q = kernels.rope_rows(q.reshape(n * h, dh), pos_per_head, 10000.0)
            k = kernels.rope_rows(k.reshape(n * h, dh), pos_per_head, 10000.0)
            q4 = q.reshape(n, h, dh)
            k4 = self._round(k.reshape(n, h, dh))
            v4 = self._round(v.reshape(n, h, dh))
            attn = self._attend(li, inputs, bounds, q4, k4, v4, mode,
                                ctx_cache, sys_cache, counter)
            if collected is not None:
                collected.append((k4, v4))
            x = self._round(x + kernels.matmul_nt(
                np.ascontiguousarray(attn.reshape(n, dm)), lw.wo))
            xm = np.ascontiguousarray(_rmsnorm(x, lw.mlp_norm))
            up = _silu(kernels.matmul_nt(xm, lw.w_up))
            x = self._round(x + kernels.matmul_nt(
                np.ascontiguousarray(up), lw.w_down))
        xf = _rmsnorm(x, w.final_norm)
        last_rows = np.ascontiguousarray(xf[bounds - 1])
        logits = kernels.matmul_nt(last_rows, w.head)
        if mode == "prefill":
            return logits, collected
        return logits

    def _attend(self, layer, inputs, bounds, q4, k4, v4, mode,
                ctx_cache, sys_cache, counter):
        if mode == "prefill":
            res = attention_with_lse(q4[None], k4[None], v4[None], causal=True)
            return res.output[0]
        starts = np.concatenate([[0], bounds[:-1]])
        q_list, k_gathered, v_gathered = [], [], []
        for (rid, _, _), lo, hi in zip(inputs, starts, bounds):
            ctx_cache.append(rid, layer, k4[lo:hi], v4[lo:hi])
            kr, vr = ctx_cache.gather(rid, layer)
            q_list.append(np.ascontiguousarray(q4[lo:hi]))
            k_gathered.append(kr)
            v_gathered.append(vr)
        if mode == "baseline":
            outs = baseline_attention_ragged(q_list, k_gathered, v_gathered,
                                             counter=counter)
        elif mode == "relay":
            outs = relay_attention_ragged(
                q_list, sys_cache.keys[layer], sys_cache.values[layer],
                k_gathered, v_gathered, counter=counter)
        else:
            raise ConfigurationError(f"unknown mode {mode!r}")
        return np.concatenate(outs, axis=0)

    # ------------------------------------------------------------------
    # system prefill

    def prefill_system_cache(self, system_tokens, prompt_id="system"):
        """Run the prompt phase over the system prompt alone (positions
        0..s-1) and freeze the per-layer KVs into a SystemKvCache."""
        system_tokens = list(system_tokens)
        if len(system_tokens) == 0:
            raise ContractError("system prompt must be non-empty")
        s = len(system_tokens)
        inputs = [("__system__", system_tokens, np.arange(s))]
        _, collected = self.forward_step(inputs, "prefill")
        keys = tuple(k for k, _ in collected)
        values = tuple(v for _, v in collected)
        return SystemKvCache(keys=keys, values=values, system_len=s,
                             prompt_id=prompt_id)

    # ------------------------------------------------------------------
    # batch generation API

    def begin_batch(self, user_prompts, mode, system_tokens,
                    pool_blocks=None, block_size=DEFAULT_BLOCK_SIZE,
                    sys_cache=None, request_ids=None):
        """Allocate caches and request states for a generation batch."""
        if mode not in ("baseline", "relay"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        system_tokens = list(system_tokens)
        for toks in user_prompts:
            if len(toks) == 0:
                raise ContractError("user prompt must be non-empty")
        if mode == "relay":
            if sys_cache is None:
                if len(system_tokens) == 0:
                    raise ConfigurationError(
                        "relay mode requires a system prompt or a prefilled "
                        "system cache")
                sys_cache = self.prefill_system_cache(system_tokens)
            elif system_tokens and sys_cache.system_len != len(system_tokens):
                raise ConfigurationError(
                    f"system cache holds {sys_cache.system_len} tokens but "
                    f"{len(system_tokens)} were given")
        else:
            sys_cache = None
        s = len(system_tokens)
        if pool_blocks is None:
            worst = max(len(t) for t in user_prompts) + 4096
            per_req = -(-(worst + (s if mode == "baseline" else 0)) // block_size)
            pool_blocks = per_req * len(user_prompts)
        cfg = self.config
        dtype = np.float32 if cfg.precision == "float32" else np.float64
        ctx_cache = PagedKvCache(cfg.layers, cfg.heads, cfg.head_dim,
                                 pool_blocks, block_size, dtype=dtype)
        if request_ids is None:
            request_ids = [f"r{i}" for i in range(len(user_prompts))]
        states = []
        for rid, toks in zip(request_ids, user_prompts):
            ctx_cache.register(rid)
            states.append(GenerationRequestState(
                request_id=rid, prompt_tokens=list(toks)))
        return GenerationBatch(mode=mode, states=states, ctx_cache=ctx_cache,
                               system_tokens=system_tokens, sys_cache=sys_cache)

    def forward_prompt_phase(self, batch: GenerationBatch,
                             counter: TrafficCounter = None):
        """Process every request's prompt, emit its first token.

        Baseline mode runs [system || user] per request with full causal
        masking; relay mode runs the user tokens only, attending the shared
        system cache unmasked with context positions offset by s.
        """
        s = batch.system_len
        inputs = []
        for st in batch.states:
            if st.phase != "prompt":
                raise ContractError(f"request {st.request_id!r} already prompted")
            if batch.mode == "baseline":
                toks = batch.system_tokens + st.prompt_tokens
                pos = np.arange(len(toks))
            else:
                toks = st.prompt_tokens
                pos = np.asarray([context_position(i, s)
                                  for i in range(len(toks))])
            inputs.append((st.request_id, toks, pos))
        logits = self.forward_step(inputs, batch.mode, batch.ctx_cache,
                                   batch.sys_cache, counter)
        tokens = np.argmax(logits, axis=1)
        for st, tok in zip(batch.states, tokens):
            st.phase = "autoregressive"
            st.emitted.append(int(tok))
            if int(tok) == END_TOKEN:
                st.finished = True
        return tokens, logits

    def forward_decode_step(self, batch: GenerationBatch,
                            counter: TrafficCounter = None):
        """One greedy decode step for every active request."""
        s = batch.system_len
        active = batch.active
        if not active:
            raise ContractError("no active requests to decode")
        inputs = []
        for st in active:
            if st.phase != "autoregressive":
                raise ContractError(
                    f"request {st.request_id!r} has not finished its prompt")
            clen = batch.ctx_cache.length(st.request_id)
            pos = clen if batch.mode == "baseline" else context_position(clen, s)
            inputs.append((st.request_id, [st.last_token], [pos]))
        logits = self.forward_step(inputs, batch.mode, batch.ctx_cache,
                                   batch.sys_cache, counter)
        tokens = np.argmax(logits, axis=1)
        for st, tok in zip(active, tokens):
            st.emitted.append(int(tok))
            if int(tok) == END_TOKEN:
                st.finished = True
        return tokens, logits

    def generate(self, user_prompts, mode, max_new_tokens, system_tokens,
                 **batch_kwargs):
        """Prompt phase plus decode steps until max_new_tokens or the end
        token (id 0); returns the emitted token list per request."""
        if max_new_tokens < 1:
            raise ContractError("max_new_tokens must be >= 1")
        batch = self.begin_batch(user_prompts, mode, system_tokens,
                                 **batch_kwargs)
        self.forward_prompt_phase(batch)
        for st in batch.states:
            if len(st.emitted) >= max_new_tokens:
                st.finished = True
        while batch.active:
            self.forward_decode_step(batch)
            for st in batch.active:
                if len(st.emitted) >= max_new_tokens:
                    st.finished = True
        return [st.emitted for st in batch.states]
