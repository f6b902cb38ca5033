"""Dense vs sparse-hub attention scaling study.

For each (agent count, mode, backend) the harness builds a randomly
initialized toy model, runs KV-cached rollouts to 24 latent frames, and
records the analytic per-block pair count / FLOPs (the closed forms), the
exact rollout pair count (closed form including windowed cache history and the
per-block forward count), instrumented kernel pair counters, and median
attention-only and whole-rollout wall-clock. Analytic counters and kernel
counters must agree exactly; wall-clock acceptance is exponent-based.
"""

from __future__ import annotations

import contextlib
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:
    threadpool_limits = None

from . import attention
from .attention import attention_cost
from .model import ToyModelConfig, build_model
from .numerics import RngStream
from .rope import RopeLayout
from .streaming import DenoiseSchedule, rollout
from .topology import TopologySpec

BENCH_MODES = ("dense", "sparse-hub")
_ROLLOUT_MODE = {"dense": "dense-causal", "sparse-hub": "causal-hub"}


def bench_model_config(L: int = 4, K: int = 2, n: int = 3, T: int = 24,
                       window: int = 24, layers: int = 1) -> ToyModelConfig:
    """Timing model: 1 block of 2 heads x 32 dims, pool of 8 identities."""
    H = 2
    return ToyModelConfig(D=64, layers=layers, heads=2,
                          rope=RopeLayout(d_t=8, d_p=16, d_h=4, d_w=4),
                          V=8, alpha=1.0, P=2, T=T, H=H, W=L // H, K=K, n=n,
                          window=window, C_z=4, action_branch=8, action_hidden=16,
                          mlp_ratio=2)


@dataclass(frozen=True)
class BenchConfig:
    agents: tuple = (2, 4, 8)
    analytic_agents: tuple = (8, 16, 32)
    modes: tuple = BENCH_MODES
    backends: tuple = ("auto",)
    T: int = 24
    L: int = 4
    K: int = 2
    n: int = 3
    window: int = 24
    layers: int = 1
    reps: int = 5
    warmup: int = 2
    seed: int = 0
    max_dense_tokens: int = 250_000
    # timed regions run single-threaded by default to stabilize measurements
    # (the compiled kernel always is; this also pins the fallback's BLAS);
    # threads=0 leaves library threading alone, and records carry the tag
    threads: int = 1


@dataclass
class BenchRecord:
    mode: str
    backend: str
    P: int
    T: int
    L: int
    K: int
    n: int
    window: int
    pairs_per_block: int  # closed form, no history (== attention_cost)
    flops: int            # closed form x 4*head_dim*heads*blocks (== attention_cost)
    rollout_pairs: int    # exact rollout count incl. windowed history
    measured_pairs: int   # instrumented kernel counters
    attn_ns: int          # median attention-only wall clock per rollout
    rollout_ns: int       # median whole-rollout wall clock
    reps: int
    threads: int
    skipped: bool = False
    note: str = ""

    CSV_HEADER = ("mode,backend,P,T,L,K,n,window,pairs_per_block,flops,rollout_pairs,"
                  "measured_pairs,attn_ns,rollout_ns,reps,threads,skipped,note")

    def csv_row(self) -> str:
        return (f"{self.mode},{self.backend},{self.P},{self.T},{self.L},{self.K},{self.n},"
                f"{self.window},{self.pairs_per_block},{self.flops},{self.rollout_pairs},"
                f"{self.measured_pairs},{self.attn_ns},{self.rollout_ns},{self.reps},"
                f"{self.threads},{int(self.skipped)},{self.note}")


def forwards_per_block(schedule: DenoiseSchedule) -> int:
    # one forward per denoise step plus the context re-forward that fills the cache
    return len(schedule.timesteps) + 1


def analytic_rollout_pairs(spec: TopologySpec, mode: str, steps_per_block: int) -> int:
    """Exact attended-pair count of one cached rollout (per layer)."""
    nL, nK, wb = spec.n * spec.L, spec.n * spec.K, spec.window_blocks
    total = 0
    for b in range(spec.num_blocks):
        nv = min(b + 1, wb)  # visible blocks including the current one
        if mode == "dense":
            total += (spec.P * nL) * (nv * spec.P * nL)
        elif mode == "sparse-hub":
            total += spec.P * nL * nv * (nL + nK)
            total += nK * nv * (spec.P * nL + nK)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return total * steps_per_block


def fit_scaling_exponent(P_values, metric_values=None, metric: str = "attn_ns") -> float:
    """Least-squares slope of log(metric) against log(P).

    Either explicit (P_values, metric_values) arrays, or (records, mode) where
    records is a BenchRecord list and `metric` names the field to fit.
    """
    if metric_values is not None and isinstance(metric_values, str):
        mode = metric_values
        rows = sorted((r.P, getattr(r, metric)) for r in P_values
                      if r.mode == mode and not r.skipped)
        P_values = [p for p, _ in rows]
        metric_values = [v for _, v in rows]
    P_values = np.asarray(P_values, dtype=np.float64)
    metric_values = np.asarray(metric_values, dtype=np.float64)
    if len(P_values) < 2:
        raise ValueError("need at least two agent counts to fit a slope")
    if np.any(metric_values <= 0):
        return 0.0
    return float(np.polyfit(np.log(P_values), np.log(metric_values), 1)[0])


def analytic_exponents(config: BenchConfig) -> dict:
    """Scaling exponents of the closed-form per-block pair counts."""
    out = {}
    for mode in config.modes:
        pairs = []
        for P in config.analytic_agents:
            spec = TopologySpec(P=P, T=config.T, L=config.L, K=config.K, n=config.n,
                                window=config.window)
            pairs.append(attention_cost(spec, mode).pairs_per_block)
        out[mode] = fit_scaling_exponent(config.analytic_agents, pairs)
    return out


def crossover_agents(config: BenchConfig, max_P: int = 4096) -> int | None:
    """Smallest P where sparse-hub needs fewer pairs per block than dense."""
    for P in range(1, max_P + 1):
        spec = TopologySpec(P=P, T=config.T, L=config.L, K=config.K, n=config.n,
                            window=config.window)
        if (attention_cost(spec, "sparse-hub").pairs_per_block
                < attention_cost(spec, "dense").pairs_per_block):
            return P
    return None


def _timed_rollout(model, first_obs, actions, schedule, mode, seed):
    pairs_seen = 0
    attn_ns = 0

    def hook(_mode, pairs, ns):
        nonlocal pairs_seen, attn_ns
        pairs_seen += pairs
        attn_ns += ns

    t0 = time.perf_counter_ns()
    with attention.instrumented(hook):
        rollout(model, first_obs, actions, schedule=schedule, rng=RngStream(seed), mode=mode)
    total_ns = time.perf_counter_ns() - t0
    return pairs_seen, attn_ns, total_ns


def _thread_limit(threads: int):
    if threads >= 1 and threadpool_limits is not None:
        return threadpool_limits(limits=threads)
    return contextlib.nullcontext()


def run_benchmark(config: BenchConfig = BenchConfig(), progress=None) -> list:
    """The scaling study: one BenchRecord per (backend, mode, agent count)."""
    records = []
    model_cfg = bench_model_config(L=config.L, K=config.K, n=config.n, T=config.T,
                                   window=config.window, layers=config.layers)
    schedule = DenoiseSchedule(timesteps=model_cfg.timesteps, shift=model_cfg.flow_shift)
    steps = forwards_per_block(schedule)
    prev_backend = attention.active_backend()
    try:
        for backend in config.backends:
            try:
                attention.set_backend(backend)
            except RuntimeError as exc:
                records.append(BenchRecord(mode="-", backend=backend, P=0, T=config.T,
                                           L=config.L, K=config.K, n=config.n,
                                           window=config.window, pairs_per_block=0, flops=0,
                                           rollout_pairs=0, measured_pairs=0, attn_ns=0,
                                           rollout_ns=0, reps=0, threads=config.threads,
                                           skipped=True, note=str(exc)))
                continue
            backend_name = attention.active_backend()
            for mode in config.modes:
                for P in config.agents:
                    spec = TopologySpec(P=P, T=config.T, L=config.L, K=config.K,
                                        n=config.n, window=config.window)
                    cost = attention_cost(spec, mode, head_dim=model_cfg.head_dim,
                                          heads=model_cfg.heads)
                    base = dict(mode=mode, backend=backend_name, P=P, T=config.T,
                                L=config.L, K=config.K, n=config.n, window=config.window,
                                pairs_per_block=cost.pairs_per_block, flops=cost.flops,
                                reps=config.reps, threads=config.threads)
                    if mode == "dense" and P * config.T * config.L > config.max_dense_tokens:
                        records.append(BenchRecord(**base, rollout_pairs=0, measured_pairs=0,
                                                   attn_ns=0, rollout_ns=0, skipped=True,
                                                   note="dense sequence over memory budget"))
                        continue
                    if P > model_cfg.V:
                        records.append(BenchRecord(**base, rollout_pairs=0, measured_pairs=0,
                                                   attn_ns=0, rollout_ns=0, skipped=True,
                                                   note=f"agent pool V={model_cfg.V} exhausted"))
                        continue
                    if progress:
                        progress(f"{backend_name}/{mode}/P={P}")
                    model = build_model(model_cfg, seed=config.seed)
                    rng = RngStream(config.seed).split(f"inputs-P{P}")
                    first = rng.split("obs").normal((P, model_cfg.H, model_cfg.W,
                                                     model_cfg.C_z))
                    actions = rng.split("acts").normal((P, config.T, 25), dtype=np.float64)
                    actions[..., :23] = actions[..., :23] > 0.8
                    expected = analytic_rollout_pairs(spec, mode, steps) * model_cfg.layers
                    roll_mode = _ROLLOUT_MODE[mode]
                    runs = []
                    with _thread_limit(config.threads):
                        for rep in range(config.warmup + config.reps):
                            runs.append(_timed_rollout(model, first, actions, schedule,
                                                       roll_mode, seed=config.seed))
                    timed = runs[config.warmup:]
                    measured = {pairs for pairs, _, _ in timed}
                    if len(measured) != 1:
                        raise AssertionError(f"pair counters varied across reps: {measured}")
                    records.append(BenchRecord(
                        **base, rollout_pairs=expected, measured_pairs=measured.pop(),
                        attn_ns=int(statistics.median(ns for _, ns, _ in timed)),
                        rollout_ns=int(statistics.median(ns for _, _, ns in timed))))
    finally:
        attention.set_backend(prev_backend)
    return records


def measured_exponents(records: list) -> dict:
    """Wall-clock attention-time exponents per (backend, mode) from bench records."""
    out = {}
    keys = {(r.backend, r.mode) for r in records if not r.skipped}
    for backend, mode in sorted(keys):
        rows = sorted((r.P, r.attn_ns) for r in records
                      if r.backend == backend and r.mode == mode and not r.skipped)
        if len(rows) >= 2:
            out[(backend, mode)] = fit_scaling_exponent([p for p, _ in rows],
                                                        [ns for _, ns in rows])
    return out


def records_to_csv(records: list) -> str:
    return "\n".join([BenchRecord.CSV_HEADER] + [r.csv_row() for r in records]) + "\n"


def long_format_table(records: list) -> str:
    """Plot-ready long format: one (record, metric, value) row per metric."""
    lines = ["mode,backend,P,metric,value"]
    for r in records:
        if r.skipped:
            continue
        for metric, value in (("pairs_per_block", r.pairs_per_block), ("flops", r.flops),
                              ("rollout_pairs", r.rollout_pairs), ("attn_ns", r.attn_ns),
                              ("rollout_ns", r.rollout_ns)):
            lines.append(f"{r.mode},{r.backend},{r.P},{metric},{value}")
    return "\n".join(lines) + "\n"
