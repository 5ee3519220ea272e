"""Command-line entry point.

Subcommands: verify (randomized oracle-equivalence suite), bench-batch
(throughput vs. prefix length, both modes), bench-serve (interactive
rate sweep), speedup-curves (theoretical speedup CSV), profile-attn
(standalone attention timing) and gen (one-shot generation). All numeric
output is CSV; flags use long names only and may also be supplied through
a key=value --config file, with explicit flags taking precedence. Exit
codes: 0 success, 1 verification failure, 2 configuration/parse errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass

import numpy as np

from relayserve import attention, costmodel
from relayserve.engine import SimulatedEngine, analytic_cost
from relayserve.errors import (ConfigurationError, ContractError,
                               RequestRejectedError, TraceParseError)
from relayserve.model import DecoderModel, ModelConfig, load_model_config
from relayserve.serving import (SchedulerConfig, load_trace, metrics_csv_row,
                                run_batch_job, run_interactive_sim,
                                synth_workload, write_metrics_csv)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2


@dataclass
class RunConfig:
    """Resolved invocation: one subcommand plus the settings every
    subcommand shares. Built from the parsed flags before dispatch."""

    subcommand: str
    mode: str = "relay"
    system_len: int = None
    seed: int = 0
    precision: str = "float64"
    hardware_profile: str = "A40"
    output: str = None
    model_config: str = None
    system_prompt: str = None

    def validate(self):
        if (self.mode == "relay" and self.system_len is not None
                and self.system_len < 1 and not self.system_prompt):
            raise ConfigurationError(
                "relay mode requires --system-len >= 1 or --system-prompt")
        if self.seed < 0:
            raise ConfigurationError("--seed must be >= 0")


def run_config_from_args(args) -> RunConfig:
    fields = ("mode", "system_len", "seed", "precision", "hardware_profile",
              "output", "model_config", "system_prompt")
    present = {f: getattr(args, f) for f in fields if hasattr(args, f)}
    return RunConfig(subcommand=args.subcommand, **present)


def _int_list(text):
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}")


def _float_list(text):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats: {text!r}")


def _read_token_file(path):
    with open(path) as f:
        parts = f.read().split()
    if not parts:
        raise ConfigurationError(f"{path}: no token ids found")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigurationError(f"{path}: token ids must be integers ({exc})")


def _load_config_defaults(argv):
    """Pull --config key=value files into a defaults dict (flags win)."""
    defaults = {}
    if "--config" not in argv:
        return defaults
    path = argv[argv.index("--config") + 1]
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{ln}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            defaults[key.replace("-", "_")] = val
    return defaults


def _build_model(args):
    if getattr(args, "model_config", None):
        config = load_model_config(args.model_config)
    else:
        config = ModelConfig(precision=args.precision, seed=args.seed)
    return DecoderModel(config)


def _system_tokens(args, config):
    if getattr(args, "system_prompt", None):
        return _read_token_file(args.system_prompt)
    rng = np.random.default_rng(args.seed + 1)
    return rng.integers(1, config.vocab_size, size=args.system_len).tolist()


def _profile(args):
    name = args.hardware_profile
    if name not in costmodel.HARDWARE_PROFILES:
        raise ConfigurationError(
            f"unknown hardware profile {name!r}; choose from "
            f"{sorted(costmodel.HARDWARE_PROFILES)}")
    return costmodel.HARDWARE_PROFILES[name]


def _out(args, default):
    return args.output if args.output else default


# ----------------------------------------------------------------------
# verify

def _random_attention_case(rng, precision="float64"):
    b = int(rng.integers(1, 9))
    h = int(rng.choice([1, 2, 4]))
    d = int(rng.choice([4, 8, 16]))
    s = int(rng.integers(1, 65))
    prompt_phase = bool(rng.integers(0, 2))
    if prompt_phase:
        m = int(rng.integers(2, 9))
        ctx_lens = [m] * b
    else:
        m = 1
        ctx_lens = [int(rng.integers(1, 65)) for _ in range(b)]
    sys_k = rng.standard_normal((s, h, d))
    sys_v = rng.standard_normal((s, h, d))
    ctx_k = [rng.standard_normal((c, h, d)) for c in ctx_lens]
    ctx_v = [rng.standard_normal((c, h, d)) for c in ctx_lens]
    q = rng.standard_normal((b, m, h, d))
    out = attention.relay_attention(q, sys_k, sys_v, ctx_k, ctx_v)
    worst = 0.0
    for r in range(b):
        prefix_q = rng.standard_normal((s + ctx_lens[r] - m, h, d))
        q_full = np.concatenate([prefix_q, q[r]], axis=0)
        k_full = np.concatenate([sys_k, ctx_k[r]], axis=0)
        v_full = np.concatenate([sys_v, ctx_v[r]], axis=0)
        oracle = attention.naive_causal_attention(q_full, k_full, v_full)
        worst = max(worst, float(np.abs(out[r] - oracle[-m:]).max()))
    return worst


def _random_model_case(rng, precision="float64"):
    config = ModelConfig(
        layers=int(rng.integers(1, 4)),
        heads=int(rng.choice([1, 2, 4])),
        head_dim=int(rng.choice([4, 8, 16])),
        ffn_dim=int(rng.choice([16, 32, 64])),
        vocab_size=int(rng.choice([32, 64, 128])),
        precision=precision,
        seed=int(rng.integers(0, 2**31)))
    model = DecoderModel(config)
    system = rng.integers(1, config.vocab_size,
                          size=int(rng.integers(1, 17))).tolist()
    prompts = [rng.integers(1, config.vocab_size,
                            size=int(rng.integers(1, 7))).tolist()
               for _ in range(int(rng.integers(1, 4)))]
    max_new = int(rng.integers(1, 7))
    tokens, worst = {}, 0.0
    for mode in ("baseline", "relay"):
        batch = model.begin_batch(prompts, mode, system)
        _, logits = model.forward_prompt_phase(batch)
        step_logits = [logits]
        for _ in range(max_new - 1):
            if not batch.active:
                break
            _, lg = model.forward_decode_step(batch)
            step_logits.append(lg)
        tokens[mode] = [st.emitted for st in batch.states]
        if mode == "baseline":
            base_logits = step_logits
        else:
            for a, b in zip(base_logits, step_logits):
                if a.shape == b.shape:
                    worst = max(worst, float(np.abs(a - b).max()))
    return tokens["baseline"] == tokens["relay"], worst


def cmd_verify(args):
    rng = np.random.default_rng(args.seed)
    attn_tol = 1e-10 if args.precision == "float64" else 1e-3
    logit_tol = 1e-8
    attn_worst = 0.0
    for _ in range(args.cases):
        attn_worst = max(attn_worst, _random_attention_case(rng))
    tokens_ok = True
    logit_worst = 0.0
    for _ in range(args.model_cases):
        same, worst = _random_model_case(rng, args.precision)
        tokens_ok = tokens_ok and same
        logit_worst = max(logit_worst, worst)
    rows = [
        ("relay-vs-oracle", args.cases, attn_worst, attn_tol,
         attn_worst < attn_tol),
        ("cross-mode-logits", args.model_cases, logit_worst, logit_tol,
         logit_worst < logit_tol),
        ("cross-mode-tokens", args.model_cases,
         0.0 if tokens_ok else 1.0, 1.0, tokens_ok),
    ]
    print(f"{'suite':<20} {'cases':>6} {'max_abs_diff':>14} "
          f"{'tolerance':>10} {'status':>8}")
    ok = True
    for name, cases, worst, tol, passed in rows:
        ok = ok and passed
        print(f"{name:<20} {cases:>6} {worst:>14.3e} {tol:>10.0e} "
              f"{'pass' if passed else 'FAIL':>8}")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


# ----------------------------------------------------------------------
# benchmarks

def _workload_lengths(args):
    if getattr(args, "workload", None):
        from relayserve.serving import SYNTH_PRESETS
        if args.workload not in SYNTH_PRESETS:
            raise ConfigurationError(
                f"unknown workload preset {args.workload!r}; choose from "
                f"{sorted(SYNTH_PRESETS)}")
        return SYNTH_PRESETS[args.workload]
    return args.user_len, args.gen_len


def cmd_bench_batch(args):
    config = ModelConfig(precision=args.precision, seed=args.seed)
    profile = _profile(args)
    sched = SchedulerConfig(kv_pool_blocks=args.pool_blocks)
    u_len, gen_len = _workload_lengths(args)
    rows = []
    for s in args.system_len_grid:
        for mode in ("baseline", "relay"):
            engine = SimulatedEngine(config, mode, s, args.pool_blocks)
            requests = synth_workload(u_len, gen_len, args.num_requests,
                                      config.vocab_size)
            metrics = run_batch_job(requests, mode, engine, sched,
                                    analytic_cost(profile))
            rows.append(metrics_csv_row(metrics))
    path = _out(args, "bench_batch.csv")
    write_metrics_csv(rows, path)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_bench_serve(args):
    config = ModelConfig(precision=args.precision, seed=args.seed)
    profile = _profile(args)
    sched = SchedulerConfig(kv_pool_blocks=args.pool_blocks)
    u_len, gen_len = _workload_lengths(args)
    rows = []
    for rate in args.rates:
        for mode in ("baseline", "relay"):
            engine = SimulatedEngine(config, mode, args.system_len,
                                     args.pool_blocks)
            if args.trace:
                requests = load_trace(args.trace, config.vocab_size)
            else:
                requests = synth_workload(u_len, gen_len, args.num_requests,
                                          config.vocab_size)
            metrics = run_interactive_sim(requests, rate, mode, engine, sched,
                                          analytic_cost(profile),
                                          seed=args.seed)
            rows.append(metrics_csv_row(metrics, extra={"rate": repr(rate)}))
    path = _out(args, "bench_serve.csv")
    write_metrics_csv(rows, path, extra_columns=("rate",))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_speedup_curves(args):
    measured = None
    if args.with_measured_traffic:
        def measured(b, c, s):
            h, d = 1, 8
            rng = np.random.default_rng(0)
            q = rng.standard_normal((b, 1, h, d))
            sys_k = rng.standard_normal((s, h, d))
            ctx_k = [rng.standard_normal((c, h, d)) for _ in range(b)]
            full_k = [np.concatenate([sys_k, k]) for k in ctx_k]
            base = attention.TrafficCounter()
            attention.baseline_attention(q, full_k, full_k, counter=base)
            relay = attention.TrafficCounter()
            attention.relay_attention(q, sys_k, sys_k, ctx_k, ctx_k,
                                      counter=relay)
            return base.elements_read / relay.elements_read
    path = _out(args, "speedup_curves.csv")
    rows = costmodel.emit_speedup_curves(
        path, batch_sizes=args.batch_sizes, context_lens=args.context_lens,
        s_values=args.system_len_grid, measured=measured)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_profile_attn(args):
    rng = np.random.default_rng(args.seed)
    h, d = args.heads, args.head_dim
    b, c = args.batch_size, args.context_len
    rows = []
    for s in args.system_len_grid:
        sys_k = rng.standard_normal((s, h, d))
        sys_v = rng.standard_normal((s, h, d))
        ctx_k = [rng.standard_normal((c, h, d)) for _ in range(b)]
        ctx_v = [rng.standard_normal((c, h, d)) for _ in range(b)]
        full_k = [np.concatenate([sys_k, k]) for k in ctx_k]
        full_v = [np.concatenate([sys_v, v]) for v in ctx_v]
        q = rng.standard_normal((b, 1, h, d))
        for mode in ("baseline", "relay"):
            counter = attention.TrafficCounter()
            best = float("inf")
            for _ in range(args.repeats):
                counter.reset()
                t0 = time.perf_counter()
                if mode == "baseline":
                    attention.baseline_attention(q, full_k, full_v,
                                                 counter=counter)
                else:
                    attention.relay_attention(q, sys_k, sys_v, ctx_k, ctx_v,
                                              counter=counter)
                best = min(best, time.perf_counter() - t0)
            rows.append({"s": s, "c": c, "b": b, "mode": mode,
                         "seconds_per_step": repr(best),
                         "elements_read": counter.elements_read})
    path = _out(args, "profile_attn.csv")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["s", "c", "b", "mode",
                                               "seconds_per_step",
                                               "elements_read"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_gen(args):
    model = _build_model(args)
    config = model.config
    system = _system_tokens(args, config)
    user = _read_token_file(args.user_prompt)
    emitted = model.generate([user], args.mode, args.max_new_tokens, system)[0]
    text = " ".join(str(t) for t in emitted)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------
# argument wiring

def build_parser():
    parser = argparse.ArgumentParser(
        prog="relayserve",
        description="Shared-prefix attention engine, simulator and cost model")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    subparsers = {}

    def common(p):
        p.add_argument("--config", help="key=value file of flag defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--precision", choices=["float64", "float32"],
                       default="float64")
        p.add_argument("--output", help="output path (CSV or text)")
        p.add_argument("--hardware-profile", default="A40")
        p.add_argument("--model-config", help="model key=value config file")

    p = subparsers["verify"] = sub.add_parser(
        "verify", help="randomized oracle-equivalence suite")
    common(p)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--model-cases", type=int, default=20)
    p.set_defaults(func=cmd_verify)

    p = subparsers["bench-batch"] = sub.add_parser("bench-batch", help="throughput vs prefix length")
    common(p)
    p.add_argument("--system-len-grid", type=_int_list,
                   default=[128, 512, 1024, 2048])
    p.add_argument("--num-requests", type=int, default=128)
    p.add_argument("--user-len", type=int, default=64)
    p.add_argument("--gen-len", type=int, default=128)
    p.add_argument("--workload", help="length preset: 64x128, 128x256, 256x512")
    p.add_argument("--pool-blocks", type=int, default=4096)
    p.set_defaults(func=cmd_bench_batch)

    p = subparsers["bench-serve"] = sub.add_parser("bench-serve", help="interactive rate sweep")
    common(p)
    p.add_argument("--rates", type=_float_list, default=[500, 1000, 2000, 4000])
    p.add_argument("--system-len", type=int, default=2048)
    p.add_argument("--num-requests", type=int, default=128)
    p.add_argument("--user-len", type=int, default=64)
    p.add_argument("--gen-len", type=int, default=128)
    p.add_argument("--workload", help="length preset: 64x128, 128x256, 256x512")
    p.add_argument("--pool-blocks", type=int, default=4096)
    p.add_argument("--trace", help="JSONL trace path")
    p.set_defaults(func=cmd_bench_serve)

    p = subparsers["speedup-curves"] = sub.add_parser("speedup-curves", help="theoretical speedup CSV")
    common(p)
    p.add_argument("--batch-sizes", type=_int_list, default=[4, 8, 16, 32])
    p.add_argument("--context-lens", type=_int_list, default=[128, 256])
    p.add_argument("--system-len-grid", type=_int_list,
                   default=[64, 128, 256, 512, 1024, 2048, 4096])
    p.add_argument("--with-measured-traffic", action="store_true")
    p.set_defaults(func=cmd_speedup_curves)

    p = subparsers["profile-attn"] = sub.add_parser("profile-attn", help="standalone attention timing")
    common(p)
    p.add_argument("--system-len-grid", type=_int_list,
                   default=[128, 256, 512, 1024, 2048])
    p.add_argument("--context-len", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_profile_attn)

    p = subparsers["gen"] = sub.add_parser("gen", help="one-shot generation")
    common(p)
    p.add_argument("--mode", choices=["baseline", "relay"], default="relay")
    p.add_argument("--system-len", type=int, default=16)
    p.add_argument("--system-prompt", help="file of whitespace-separated ids")
    p.add_argument("--user-prompt", required=True,
                   help="file of whitespace-separated ids")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.set_defaults(func=cmd_gen)

    return parser, subparsers


def _apply_config_defaults(subparser, defaults):
    """Convert key=value strings through each flag's declared type and
    install them as defaults, so explicit flags still take precedence."""
    typed = {}
    actions = {act.dest: act for act in subparser._actions}
    for key, val in defaults.items():
        act = actions.get(key)
        if act is None:
            raise ConfigurationError(f"config key {key!r} is not a flag of "
                                     f"this subcommand")
        if isinstance(act, argparse._StoreTrueAction):
            typed[key] = val.lower() in ("1", "true", "yes")
        elif act.type is not None:
            typed[key] = act.type(val)
        else:
            typed[key] = val
    subparser.set_defaults(**typed)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        defaults = _load_config_defaults(argv)
        if defaults and argv and argv[0] in subparsers:
            _apply_config_defaults(subparsers[argv[0]], defaults)
        args = parser.parse_args(argv)
        run_config_from_args(args).validate()
        return args.func(args)
    except (ConfigurationError, TraceParseError, ContractError,
            RequestRejectedError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
