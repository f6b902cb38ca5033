"""Multi-head attention: dense masked reference, sparse hub execution, cost model.

Two routes compute the same thing:
  * masked_attention_reference — dense scaled-dot-product attention under an
    explicit boolean mask; pure numpy, always available, the oracle.
  * run_plan / sparse_hub_attention — grouped execution that never enumerates
    disallowed agent-agent pairs. Queries are partitioned into (stream, block)
    groups; each group attends one gathered key set, and softmax normalization
    is taken over exactly that set.

The grouped kernel has two backends: a compiled extension (built from
_kernels.pyx) and a pure-numpy fallback, selected at import and switchable
with set_backend().
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _pykernels
from .numerics import RngStream, softmax_masked
from .topology import TopologySpec

try:
    from . import _kernels
except ImportError:
    _kernels = None

HAVE_COMPILED = _kernels is not None
_active_backend = "compiled" if HAVE_COMPILED else "python"


def active_backend() -> str:
    return _active_backend


def set_backend(name: str) -> str:
    """Select the grouped-attention backend: 'compiled', 'python' or 'auto'."""
    global _active_backend
    if name == "auto":
        name = "compiled" if HAVE_COMPILED else "python"
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled kernels are not available in this build")
    _active_backend = name
    return _active_backend


# optional instrumentation hook: called as hook(mode, pairs, elapsed_ns)
# around every grouped kernel invocation
_instrument_hook = None


class instrumented:
    """Context manager installing a (mode, pairs, ns) callback on kernel calls."""

    def __init__(self, hook):
        self.hook = hook

    def __enter__(self):
        global _instrument_hook
        self._prev = _instrument_hook
        _instrument_hook = self.hook
        return self

    def __exit__(self, *exc):
        global _instrument_hook
        _instrument_hook = self._prev
        return False


@dataclass(frozen=True)
class GatherPlan:
    """Packed (query set, key set) groups over a flat token sequence."""

    mode: str
    seq_len: int
    q_starts: np.ndarray  # int64, len = groups+1
    q_idx: np.ndarray
    k_starts: np.ndarray
    k_idx: np.ndarray

    @property
    def num_groups(self) -> int:
        return len(self.q_starts) - 1

    @property
    def pair_count(self) -> int:
        nq = np.diff(self.q_starts)
        nk = np.diff(self.k_starts)
        return int(np.sum(nq * nk))

    def group(self, g: int):
        return (self.q_idx[self.q_starts[g]:self.q_starts[g + 1]],
                self.k_idx[self.k_starts[g]:self.k_starts[g + 1]])


def _agent_range(spec: TopologySpec, p: int, b0: int, b1: int) -> np.ndarray:
    """Agent p's token indices for blocks b0..b1-1 (contiguous frames)."""
    lo = p * spec.T * spec.L + b0 * spec.n * spec.L
    hi = p * spec.T * spec.L + b1 * spec.n * spec.L
    return np.arange(lo, hi, dtype=np.int64)


def _hub_range(spec: TopologySpec, b0: int, b1: int) -> np.ndarray:
    lo = spec.num_agent_tokens + b0 * spec.n * spec.K
    hi = spec.num_agent_tokens + b1 * spec.n * spec.K
    return np.arange(lo, hi, dtype=np.int64)


def _pack(groups) -> GatherPlan:
    q_starts = [0]
    k_starts = [0]
    q_parts, k_parts = [], []
    for qi, ki in groups:
        q_parts.append(qi)
        k_parts.append(ki)
        q_starts.append(q_starts[-1] + len(qi))
        k_starts.append(k_starts[-1] + len(ki))
    cat = lambda parts: (np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))
    return (np.asarray(q_starts, dtype=np.int64), cat(q_parts),
            np.asarray(k_starts, dtype=np.int64), cat(k_parts))


@lru_cache(maxsize=128)
def build_plan(spec: TopologySpec, mode: str, agent_order: tuple | None = None) -> GatherPlan:
    """Gather plan for a full-sequence forward.

    modes:
      causal-hub          — agent queries see own stream + hubs, hub queries see
                            everything; block-causal with the local window.
      dense-causal        — all agents attend all agents (no hub tokens);
                            block-causal with the local window.
      bidirectional-dense — all agents attend all agents, no causality, no hubs.

    agent_order fixes the arithmetic order of cross-agent key gathers (used to
    make joint agent-permutation equivariance exact); default is slot order.
    """
    order = list(agent_order) if agent_order is not None else list(range(spec.P))
    if sorted(order) != list(range(spec.P)):
        raise ValueError(f"agent_order {agent_order} is not a permutation of 0..{spec.P - 1}")
    wb = spec.window_blocks
    groups = []
    if mode == "causal-hub":
        seq_len = spec.seq_len
        for b in range(spec.num_blocks):
            b0 = max(0, b - wb + 1)
            hub_keys = _hub_range(spec, b0, b + 1)
            for p in range(spec.P):
                own = _agent_range(spec, p, b0, b + 1)
                groups.append((_agent_range(spec, p, b, b + 1),
                               np.concatenate([own, hub_keys])))
            if spec.K > 0:
                agent_keys = [_agent_range(spec, p, b0, b + 1) for p in order]
                groups.append((_hub_range(spec, b, b + 1),
                               np.concatenate(agent_keys + [hub_keys])))
    elif mode == "dense-causal":
        seq_len = spec.num_agent_tokens
        for b in range(spec.num_blocks):
            b0 = max(0, b - wb + 1)
            keys = np.concatenate([_agent_range(spec, p, b0, b + 1) for p in order])
            queries = np.concatenate([_agent_range(spec, p, b, b + 1) for p in order])
            groups.append((queries, keys))
    elif mode == "bidirectional-dense":
        seq_len = spec.num_agent_tokens
        all_tokens = np.concatenate([_agent_range(spec, p, 0, spec.num_blocks) for p in order])
        groups.append((all_tokens, all_tokens))
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    q_starts, q_idx, k_starts, k_idx = _pack(groups)
    return GatherPlan(mode=mode, seq_len=seq_len, q_starts=q_starts, q_idx=q_idx,
                      k_starts=k_starts, k_idx=k_idx)


def _as_heads(x: np.ndarray):
    """Normalize (S, d) or (heads, S, d) to contiguous (heads, S, d)."""
    x = np.asarray(x)
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (S, d) or (heads, S, d), got {x.shape}")
    return np.ascontiguousarray(x), squeezed


def run_plan(q, k, v, plan: GatherPlan, scale: float | None = None,
             out: np.ndarray | None = None) -> np.ndarray:
    """Execute a gather plan with the active backend."""
    q3, squeezed = _as_heads(q)
    k3, _ = _as_heads(k)
    v3, _ = _as_heads(v)
    if q3.shape != k3.shape or k3.shape != v3.shape:
        raise ValueError(f"q/k/v shapes differ: {q3.shape}, {k3.shape}, {v3.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q3.shape[-1])
    if out is None:
        out = np.zeros_like(q3)
    kernel = _kernels if _active_backend == "compiled" else _pykernels
    t0 = time.perf_counter_ns()
    pairs = kernel.grouped_attention(q3, k3, v3, plan.q_starts, plan.q_idx,
                                     plan.k_starts, plan.k_idx, float(scale), out)
    if _instrument_hook is not None:
        _instrument_hook(plan.mode, int(pairs), time.perf_counter_ns() - t0)
    return out[0] if squeezed else out


def run_gathered(q, groups, scale: float | None = None, mode: str = "cached",
                 out: np.ndarray | None = None) -> np.ndarray:
    """Attention where each group brings its own gathered key/value arrays.

    q: (heads, Sq, d); groups: iterable of (q_rows, K, V) with K/V shaped
    (heads, nk, d). Used by the KV-cached streaming path, where keys live in
    per-stream cache buffers rather than one flat sequence.
    """
    q3, squeezed = _as_heads(q)
    if scale is None:
        scale = 1.0 / np.sqrt(q3.shape[-1])
    if out is None:
        out = np.zeros_like(q3)
    kernel = _kernels if _active_backend == "compiled" else _pykernels
    for q_rows, K, V in groups:
        q_rows = np.ascontiguousarray(q_rows, dtype=np.int64)
        K = np.ascontiguousarray(K)
        V = np.ascontiguousarray(V)
        nk = K.shape[1]
        q_starts = np.array([0, len(q_rows)], dtype=np.int64)
        k_starts = np.array([0, nk], dtype=np.int64)
        k_idx = np.arange(nk, dtype=np.int64)
        t0 = time.perf_counter_ns()
        pairs = kernel.grouped_attention(q3, K, V, q_starts, q_rows, k_starts, k_idx,
                                         float(scale), out)
        if _instrument_hook is not None:
            _instrument_hook(mode, int(pairs), time.perf_counter_ns() - t0)
    return out[0] if squeezed else out


def masked_attention_reference(q, k, v, mask: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Dense scaled-dot-product attention under a boolean mask (the oracle)."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.shape[-2] != mask.shape[0] or k.shape[-2] != mask.shape[1]:
        raise ValueError(f"mask {mask.shape} does not match q {q.shape} / k {k.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"q/k head dims differ: {q.shape} vs {k.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * np.asarray(scale, dtype=q.dtype)
    weights = softmax_masked(logits, np.broadcast_to(mask, logits.shape))
    return np.matmul(weights, v)


def sparse_hub_attention(q, k, v, spec: TopologySpec, agent_order: tuple | None = None) -> np.ndarray:
    """Hub-topology attention without enumerating disallowed agent-agent pairs.

    Numerically equal (within dtype tolerance) to masked_attention_reference
    under causal_hub_mask AND local_window_mask for the same spec.
    """
    q3, _ = _as_heads(q)
    if q3.shape[1] != spec.seq_len:
        raise ValueError(f"sequence length {q3.shape[1]} != spec layout {spec.seq_len}")
    plan = build_plan(spec, "causal-hub", agent_order)
    return run_plan(q, k, v, plan)


@dataclass(frozen=True)
class AttentionWeights:
    """Per-layer projection matrices for multi-head attention."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    heads: int
    head_dim: int

    def __post_init__(self):
        D = self.wq.shape[0]
        if self.heads * self.head_dim != D:
            raise ValueError(f"heads {self.heads} x head_dim {self.head_dim} != D {D}")


def init_attention_weights(rng: RngStream, D: int, heads: int, dtype=np.float32) -> AttentionWeights:
    if D % heads != 0:
        raise ValueError(f"model dim {D} not divisible by heads {heads}")
    std = 1.0 / np.sqrt(D)
    mats = {name: (rng.split(name).normal((D, D)) * std).astype(dtype)
            for name in ("wq", "wk", "wv", "wo")}
    zeros = {f"b{name[-1]}": np.zeros(D, dtype=dtype) for name in ("wq", "wk", "wv", "wo")}
    return AttentionWeights(heads=heads, head_dim=D // heads, **mats, **zeros)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(S, D) -> contiguous (heads, S, head_dim)."""
    S, D = x.shape
    return np.ascontiguousarray(x.reshape(S, heads, D // heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(heads, S, head_dim) -> (S, D)."""
    heads, S, hd = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(S, heads * hd)


def multi_head_attention(x: np.ndarray, weights: AttentionWeights, spec: TopologySpec,
                         angles: np.ndarray, mode: str = "causal-hub",
                         agent_order: tuple | None = None) -> np.ndarray:
    """Projection -> rotary(q, k) -> grouped attention -> output projection.

    angles: per-token rotation angles (S, head_dim/2), shared across heads;
    hub rows must already follow the hub phase rule (temporal band only).
    """
    from .rope import apply_rotary

    plan = build_plan(spec, mode, agent_order)
    x = np.asarray(x)
    if x.shape[0] != plan.seq_len:
        raise ValueError(f"x has {x.shape[0]} tokens, mode {mode!r} expects {plan.seq_len}")
    q = split_heads(x @ weights.wq + weights.bq, weights.heads)
    k = split_heads(x @ weights.wk + weights.bk, weights.heads)
    v = split_heads(x @ weights.wv + weights.bv, weights.heads)
    ang = angles[None].astype(x.dtype, copy=False)
    q = np.ascontiguousarray(apply_rotary(q, ang))
    k = np.ascontiguousarray(apply_rotary(k, ang))
    y = run_plan(q, k, v, plan)
    return merge_heads(y) @ weights.wo + weights.bo


@dataclass(frozen=True)
class CostReport:
    """Closed-form attention cost for one topology and mode."""

    mode: str
    P: int
    T: int
    L: int
    K: int
    n: int
    pairs_per_block: int
    flops: int

    CSV_HEADER = "mode,P,T,L,K,n,pairs,flops"

    def csv_row(self) -> str:
        return (f"{self.mode},{self.P},{self.T},{self.L},{self.K},{self.n},"
                f"{self.pairs_per_block},{self.flops}")


def attention_cost(spec: TopologySpec, mode: str, head_dim: int = 16, heads: int = 2) -> CostReport:
    """Per-block attended-pair count and whole-sequence FLOPs estimate.

    dense:      P^2 (nL)^2 pairs per block (joint attention, no hubs).
    sparse-hub: P nL (nL + nK) + nK (P nL + nK) pairs per block.
    FLOPs = pairs x (2 head_dim for logits + 2 head_dim for value mix)
            x heads x blocks.
    """
    nL = spec.n * spec.L
    nK = spec.n * spec.K
    if mode == "dense":
        pairs = spec.P ** 2 * nL ** 2
    elif mode == "sparse-hub":
        pairs = spec.P * nL * (nL + nK) + nK * (spec.P * nL + nK)
    else:
        raise ValueError(f"unknown cost mode {mode!r} (want 'dense' or 'sparse-hub')")
    flops = pairs * 4 * head_dim * heads * spec.num_blocks
    return CostReport(mode=mode, P=spec.P, T=spec.T, L=spec.L, K=spec.K, n=spec.n,
                      pairs_per_block=pairs, flops=flops)
