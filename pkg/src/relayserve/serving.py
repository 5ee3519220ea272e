"""Request lifecycle and continuous-batching scheduler.

The simulator is a single-threaded discrete-event loop on a simulated
clock: requests arrive (all at once for batch jobs, Poisson-timed for the
interactive scenario), the scheduler admits them while KV capacity allows
and picks a batch whose size is always a member of the configured set,
the engine executes one prompt or decode step, and a pluggable step-cost
function advances the clock (measured wall time by default, analytic
roofline time for reproducible benchmarks). Finished requests leave and
queued ones join between steps.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from relayserve.engine import wallclock_cost
from relayserve.errors import (ContractError, RequestRejectedError,
                               TraceParseError)
from relayserve.model import END_TOKEN

# dynamic batch sizes: powers of two up to 16, then steps of 8 to 256
DEFAULT_BATCH_SIZES = (1, 2, 4, 8, 16) + tuple(range(24, 257, 8))

SYNTH_PRESETS = {
    "64x128": (64, 128),
    "128x256": (128, 256),
    "256x512": (256, 512),
}


@dataclass
class Request:
    """One serving request's lifecycle on the simulated clock."""

    id: str
    user_tokens: list
    max_gen: int
    arrival_s: float = 0.0
    system_prompt_id: str = "system"
    state: str = "queued"  # queued -> prompt -> decoding -> finished
    first_token_time: float = None
    finish_time: float = None
    tokens_emitted: int = 0
    generated: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.user_tokens) < 1:
            raise ContractError(f"request {self.id!r}: empty user prompt")
        if self.max_gen < 1:
            raise ContractError(f"request {self.id!r}: max_gen must be >= 1")

    @property
    def user_len(self):
        return len(self.user_tokens)


@dataclass(frozen=True)
class SchedulerConfig:
    allowed_batch_sizes: tuple = DEFAULT_BATCH_SIZES
    kv_pool_blocks: int = 512
    admission_policy: str = "reserve-worst-case"

    def __post_init__(self):
        if not self.allowed_batch_sizes or min(self.allowed_batch_sizes) != 1:
            raise ContractError("allowed_batch_sizes must include 1")

    def round_batch(self, n):
        """Largest allowed batch size that is <= n."""
        return max(size for size in self.allowed_batch_sizes if size <= n)


@dataclass
class Metrics:
    mode: str
    system_len: int
    throughput_tokens_per_s: float
    throughput_req_per_s: float
    normalized_latency_s: float
    elements_read_total: int
    batch_size_hist: dict
    total_time_s: float
    finished_requests: int

    def hist_str(self):
        return "|".join(f"{size}:{count}" for size, count
                        in sorted(self.batch_size_hist.items()))


METRICS_CSV_COLUMNS = ("mode", "system_len", "batch_size_hist", "tokens_per_s",
                       "req_per_s", "norm_latency_s", "elements_read_total")


def metrics_csv_row(metrics: Metrics, extra=None):
    row = {
        "mode": metrics.mode,
        "system_len": metrics.system_len,
        "batch_size_hist": metrics.hist_str(),
        "tokens_per_s": repr(metrics.throughput_tokens_per_s),
        "req_per_s": repr(metrics.throughput_req_per_s),
        "norm_latency_s": repr(metrics.normalized_latency_s),
        "elements_read_total": metrics.elements_read_total,
    }
    if extra:
        row.update(extra)
    return row


def write_metrics_csv(rows, path, extra_columns=()):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=list(extra_columns) + list(METRICS_CSV_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)


def poisson_arrivals(rate, n, seed):
    """Cumulative sums of n i.i.d. exponential gaps with mean 1/rate."""
    if rate <= 0:
        raise ContractError(f"arrival rate must be positive, got {rate}")
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.exponential(1.0 / rate, size=n))


@dataclass
class StepPlan:
    kind: str   # "prompt" | "decode" | "idle"
    batch: list


def schedule_step(queue, running, config: SchedulerConfig, engine):
    """Admit what fits, then pick the next step's batch.

    Admission-only policy: a queued request is admitted while the sum of
    worst-case block reservations fits the pool (so a running request can
    never strand mid-decode); a request whose reservation exceeds the
    whole pool is rejected outright. Newly admitted requests take a prompt
    step before any decoding resumes; batch sizes are rounded down to the
    configured set, least-progressed decodes first.
    """
    max_batch = max(config.allowed_batch_sizes)
    while queue and len(running) < max_batch:
        req = queue[0]
        need = engine.blocks_needed(req)
        if need > engine.total_blocks:
            raise RequestRejectedError(
                f"request {req.id!r} needs {need} blocks, pool has "
                f"{engine.total_blocks}")
        if need > engine.total_blocks - engine.reserved_blocks:
            break
        queue.popleft()
        engine.start_request(req)
        req.state = "prompt"
        running.append(req)
    if not running:
        return StepPlan(kind="idle", batch=[])
    prompting = [r for r in running if r.state == "prompt"]
    if prompting:
        k = config.round_batch(len(prompting))
        return StepPlan(kind="prompt", batch=prompting[:k])
    decoding = sorted((r for r in running if r.state == "decoding"),
                      key=lambda r: (r.tokens_emitted, r.arrival_s, r.id))
    k = config.round_batch(len(decoding))
    return StepPlan(kind="decode", batch=decoding[:k])


def _drive(requests, mode, engine, config, cost_fn, log_writer=None):
    """Discrete-event loop shared by the batch and interactive runners."""
    total = len(requests)
    pending = deque(sorted(requests, key=lambda r: (r.arrival_s, r.id)))
    queue = deque()
    running = []
    finished = []
    clock = 0.0
    hist = Counter()
    elements_total = 0
    step_idx = 0
    while pending or queue or running:
        while pending and pending[0].arrival_s <= clock:
            queue.append(pending.popleft())
        plan = schedule_step(queue, running, config, engine)
        if plan.kind == "idle":
            if not pending:
                raise RequestRejectedError(
                    "queued requests cannot be admitted on an empty pool")
            clock = max(clock, pending[0].arrival_s)
            continue
        if plan.kind == "prompt":
            result = engine.prompt_step(plan.batch)
        else:
            result = engine.decode_step(plan.batch)
        clock += cost_fn(result)
        hist[len(plan.batch)] += 1
        elements_total += result.attn_elements
        for req in plan.batch:
            tok = result.tokens[req.id]
            req.tokens_emitted += 1
            req.generated.append(tok)
            if plan.kind == "prompt":
                req.state = "decoding"
                req.first_token_time = clock
            if tok == END_TOKEN or req.tokens_emitted >= req.max_gen:
                req.state = "finished"
                req.finish_time = clock
                engine.finish_request(req)
                running.remove(req)
                finished.append(req)
        assert len(pending) + len(queue) + len(running) + len(finished) == total
        if log_writer is not None:
            log_writer.writerow({
                "step": step_idx, "kind": plan.kind,
                "batch_size": len(plan.batch), "clock_s": repr(clock),
                "attn_elements": result.attn_elements})
        step_idx += 1
    tokens = sum(r.tokens_emitted for r in finished)
    if finished:
        norm_latency = sum((r.finish_time - r.arrival_s) / r.tokens_emitted
                           for r in finished) / len(finished)
    else:
        norm_latency = math.nan
    total_time = clock if clock > 0 else math.inf
    return Metrics(
        mode=mode,
        system_len=engine.system_len,
        throughput_tokens_per_s=tokens / total_time,
        throughput_req_per_s=len(finished) / total_time,
        normalized_latency_s=norm_latency,
        elements_read_total=elements_total,
        batch_size_hist=dict(hist),
        total_time_s=clock,
        finished_requests=len(finished))


STEP_LOG_COLUMNS = ("step", "kind", "batch_size", "clock_s", "attn_elements")


def run_batch_job(requests, mode, engine, config=None, cost_fn=None,
                  log_path=None):
    """Noninteractive batch processing: all requests available at time 0."""
    config = config or SchedulerConfig()
    cost_fn = cost_fn or wallclock_cost
    for req in requests:
        req.arrival_s = 0.0
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=STEP_LOG_COLUMNS)
            writer.writeheader()
            return _drive(requests, mode, engine, config, cost_fn, writer)
    return _drive(requests, mode, engine, config, cost_fn)


def run_interactive_sim(requests, rate, mode, engine, config=None,
                        cost_fn=None, seed=0):
    """Interactive serving: Poisson arrivals at the given request rate."""
    config = config or SchedulerConfig()
    cost_fn = cost_fn or wallclock_cost
    times = poisson_arrivals(rate, len(requests), seed)
    for req, t in zip(requests, times):
        req.arrival_s = float(t)
    return _drive(requests, mode, engine, config, cost_fn)


def synth_workload(u_len, gen_len, n, vocab_size=256,
                   system_prompt_id="system", id_prefix="synth"):
    """n identically shaped requests with fixed prompt/generation lengths."""
    if u_len < 1 or gen_len < 1:
        raise ContractError("u_len and gen_len must be >= 1")
    requests = []
    for i in range(n):
        tokens = [((i + j) % (vocab_size - 1)) + 1 for j in range(u_len)]
        requests.append(Request(id=f"{id_prefix}-{i:04d}", user_tokens=tokens,
                                max_gen=gen_len,
                                system_prompt_id=system_prompt_id))
    return requests


def load_trace(path, vocab_size=256):
    """Parse a JSONL trace: one request per line with keys id, arrival_s,
    system_prompt_id, user_len, gen_len. Filler token ids are generated
    deterministically from the line number."""
    requests = []
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"{path}:{ln}: invalid JSON ({exc})")
            try:
                rid = str(obj["id"])
                arrival = float(obj["arrival_s"])
                prompt_id = str(obj["system_prompt_id"])
                user_len = int(obj["user_len"])
                gen_len = int(obj["gen_len"])
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceParseError(f"{path}:{ln}: bad record ({exc})")
            if user_len < 1 or gen_len < 1:
                raise TraceParseError(
                    f"{path}:{ln}: user_len and gen_len must be >= 1")
            tokens = [((ln + j) % (vocab_size - 1)) + 1 for j in range(user_len)]
            requests.append(Request(id=rid, user_tokens=tokens,
                                    max_gen=gen_len, arrival_s=arrival,
                                    system_prompt_id=prompt_id))
    return requests
