"""KV-cached block-autoregressive rollout.

Each agent stream owns a key/value ring buffer per layer; hub tokens share one
more. Generation walks the sequence one temporal block at a time: initialize
the block from seeded noise, run the few-step denoise schedule (each step a
cached forward where new-block queries read own-stream cache + hub cache +
the current block), then re-forward the finished block at the context noise
level and append its keys/values to the caches. Cross-agent information flows
only through the hub buffers, cached histories included.

`rollout(..., use_cache=False)` runs the monolithic reference route instead:
every denoise step is a full-sequence forward under the causal hub topology.
Block causality makes the two routes equivalent up to float accumulation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .attention import run_gathered
from .model import (ToyModel, _block_tokens_forward, _expand_sigma, _vertex_order, forward)
from .numerics import RngStream
from .simplex import VertexAssignment, identity_assignment
from .topology import TopologySpec

HUB_STREAM = "hub"


def warp_sigma(t, shift: float):
    """Timestep -> noise level under the flow-shift warp s*u / (1 + (s-1)*u)."""
    u = np.asarray(t, dtype=np.float64) / 1000.0
    return shift * u / (1.0 + (shift - 1.0) * u)


@dataclass(frozen=True)
class DenoiseSchedule:
    timesteps: tuple = (1000, 750, 500, 250)
    shift: float = 5.0

    def __post_init__(self):
        ts = tuple(self.timesteps)
        if not ts:
            raise ValueError("schedule needs at least one timestep")
        if any(t2 >= t1 for t1, t2 in zip(ts, ts[1:])):
            raise ValueError(f"timesteps must be strictly decreasing, got {ts}")
        if ts[0] > 1000 or ts[-1] <= 0:
            raise ValueError(f"timesteps must lie in (0, 1000], got {ts}")
        object.__setattr__(self, "timesteps", ts)


def schedule_sigmas(schedule: DenoiseSchedule) -> np.ndarray:
    """Noise levels for the schedule's timesteps (sigma in (0, 1])."""
    return warp_sigma(np.asarray(schedule.timesteps, dtype=np.float64), schedule.shift)


class KVCacheSet:
    """Per-layer, per-stream key/value ring buffers bounded by the local window."""

    def __init__(self, spec: TopologySpec, layers: int):
        self.spec = spec
        self.layers = layers
        self.window_blocks = spec.window_blocks
        self.streams = list(range(spec.P)) + ([HUB_STREAM] if spec.K else [])
        self._blocks = {(i, s): deque() for i in range(layers) for s in self.streams}
        self.cursor = 0
        self.access_log = None  # set to [] to record (layer, stream, reader) gathers

    def cached_block_ids(self, stream, layer: int = 0):
        return [b for b, _, _ in self._blocks[(layer, stream)]]

    def cached_frames(self, stream, layer: int = 0) -> int:
        return len(self._blocks[(layer, stream)]) * self.spec.n

    def token_count(self, layer: int) -> int:
        return sum(k.shape[1] for _, k, _ in
                   (entry for s in self.streams for entry in self._blocks[(layer, s)]))

    def stream_capacity_tokens(self, stream) -> int:
        per_frame = self.spec.K if stream == HUB_STREAM else self.spec.L
        return self.window_blocks * self.spec.n * per_frame

    def append_block(self, block_kv: list, block_id: int) -> None:
        """block_kv: per layer, dict stream -> (k, v) with shapes (heads, tokens, hd)."""
        if block_id != self.cursor:
            raise ValueError(f"blocks must be appended in order: expected {self.cursor}, "
                             f"got {block_id}")
        if len(block_kv) != self.layers:
            raise ValueError(f"got k/v for {len(block_kv)} layers, cache has {self.layers}")
        for i, layer_kv in enumerate(block_kv):
            for s in self.streams:
                k, v = layer_kv[s]
                q = self._blocks[(i, s)]
                q.append((block_id, k, v))
                while len(q) > self.window_blocks:  # strictly oldest first
                    q.popleft()
        self.cursor += 1

    def visible(self, layer: int, stream, query_block: int, reader=None):
        """Cached (k, v) concatenated over blocks the query block may see."""
        if self.access_log is not None:
            self.access_log.append((layer, stream, reader))
        lo = query_block - self.window_blocks + 1
        ks, vs = [], []
        for b, k, v in self._blocks[(layer, stream)]:
            if b >= lo:
                ks.append(k)
                vs.append(v)
        if not ks:
            return None, None
        return np.concatenate(ks, axis=1), np.concatenate(vs, axis=1)


def init_caches(spec: TopologySpec, layers: int) -> KVCacheSet:
    return KVCacheSet(spec, layers)


def append_block(caches: KVCacheSet, block_kv: list, block_id: int) -> KVCacheSet:
    caches.append_block(block_kv, block_id)
    return caches


def _cached_attention(model, caches, spec, b, order, layer, q, k_cur, v_cur, mode):
    """One attention pass for the current block against cache + current tokens.

    q/k_cur/v_cur: (heads, S_cur, hd) where S_cur = P*n*L (+ n*K in hub mode).
    Splits current tokens by stream, then runs one gathered group per agent
    (own cache + own current + hub cache + hub current) and one for the hubs
    (all agents in vertex order + hubs).
    """
    P, n, L, K = spec.P, spec.n, spec.L, spec.K
    nL, nK = n * L, n * K

    def cur(stream):
        if stream == HUB_STREAM:
            sl = slice(P * nL, P * nL + nK)
        else:
            sl = slice(stream * nL, (stream + 1) * nL)
        return k_cur[:, sl], v_cur[:, sl]

    def stream_kv(stream, reader):
        ck, cv = caches.visible(layer, stream, b, reader=reader)
        kk, vv = cur(stream)
        if ck is None:
            return kk, vv
        return np.concatenate([ck, kk], axis=1), np.concatenate([cv, vv], axis=1)

    groups = []
    if mode == "causal-hub":
        for p in range(P):
            kp, vp = stream_kv(p, reader=f"agent{p}")
            if K:
                kh, vh = stream_kv(HUB_STREAM, reader=f"agent{p}")
                kp = np.concatenate([kp, kh], axis=1)
                vp = np.concatenate([vp, vh], axis=1)
            groups.append((np.arange(p * nL, (p + 1) * nL, dtype=np.int64), kp, vp))
        if K:
            parts_k, parts_v = [], []
            for p in order:
                kp, vp = stream_kv(p, reader="hub")
                parts_k.append(kp)
                parts_v.append(vp)
            kh, vh = stream_kv(HUB_STREAM, reader="hub")
            parts_k.append(kh)
            parts_v.append(vh)
            groups.append((np.arange(P * nL, P * nL + nK, dtype=np.int64),
                           np.concatenate(parts_k, axis=1), np.concatenate(parts_v, axis=1)))
    elif mode == "dense-causal":
        parts_k, parts_v = [], []
        for p in order:
            kp, vp = stream_kv(p, reader="dense")
            parts_k.append(kp)
            parts_v.append(vp)
        groups.append((np.arange(P * nL, dtype=np.int64),
                       np.concatenate(parts_k, axis=1), np.concatenate(parts_v, axis=1)))
    else:
        raise ValueError(f"unsupported cached mode {mode!r}")
    return run_gathered(q, groups, scale=1.0 / np.sqrt(model.config.head_dim), mode=mode)


def _cached_block_forward(model: ToyModel, caches: KVCacheSet, spec, b: int,
                          z_block, sigma_frames, actions_block, assignment, mode,
                          collect_kv: bool = False):
    """Forward of one temporal block's tokens reading history from the caches."""
    order = _vertex_order(assignment)

    def attention(layer, q, k_cur, v_cur):
        return _cached_attention(model, caches, spec, b, order, layer, q, k_cur, v_cur, mode)

    return _block_tokens_forward(model, spec, b, z_block, sigma_frames, actions_block,
                                 assignment, mode, attention, collect_kv=collect_kv)


@dataclass
class RolloutResult:
    latents: np.ndarray  # (P, T, H, W, C_z)
    velocities: list | None = None  # per (block, step) velocity predictions
    peak_cache_tokens: int | None = None
    caches: KVCacheSet | None = None


def rollout(model: ToyModel, first_obs: np.ndarray, actions: np.ndarray,
            schedule: DenoiseSchedule | None = None, rng: RngStream | None = None,
            mode: str = "causal-hub", assignment: VertexAssignment | None = None,
            sigma_ctx: float = 0.0, use_cache: bool = True,
            record_trace: bool = False, access_log: bool = False) -> RolloutResult:
    """Block-autoregressive generation conditioned on first-frame latents and actions.

    first_obs: (P, H, W, C_z) clean context for frame 0; actions: (P, T, A).
    use_cache=False runs the monolithic full-sequence reference route with the
    same seeded noise (the oracle for cache correctness).
    """
    cfg = model.config
    if schedule is None:
        schedule = DenoiseSchedule(timesteps=cfg.timesteps, shift=cfg.flow_shift)
    if rng is None:
        rng = RngStream(0)
    first_obs = np.asarray(first_obs, dtype=model.dtype)
    P = first_obs.shape[0]
    if first_obs.shape != (P, cfg.H, cfg.W, cfg.C_z):
        raise ValueError(f"first_obs shaped {first_obs.shape}, expected "
                         f"(P, {cfg.H}, {cfg.W}, {cfg.C_z})")
    actions = np.asarray(actions)
    if actions.ndim != 3 or actions.shape[0] != P or actions.shape[1] < cfg.T:
        raise ValueError(f"actions shaped {actions.shape} do not cover all {cfg.T} frames "
                         f"for {P} agents")
    actions = actions[:, :cfg.T]
    if assignment is None:
        assignment = identity_assignment(P)
    spec = cfg.spec(P)
    if mode == "dense-causal":
        spec = replace(spec, K=0)
    elif mode != "causal-hub":
        raise ValueError(f"rollout mode must be 'causal-hub' or 'dense-causal', got {mode!r}")

    sigmas = schedule_sigmas(schedule)
    sig_path = np.concatenate([sigmas, [0.0]])
    n, num_blocks = cfg.n, spec.num_blocks
    caches = init_caches(spec, cfg.layers) if use_cache else None
    if caches is not None and access_log:
        caches.access_log = []

    z_out = np.zeros((P, cfg.T, cfg.H, cfg.W, cfg.C_z), dtype=model.dtype)
    finalized = []  # clean blocks, for the monolithic route
    velocities = [] if record_trace else None
    peak_tokens = 0

    def step_forward(b, z_block, sigma_frames_block):
        if use_cache:
            v, _ = _cached_block_forward(model, caches, spec, b, z_block,
                                         sigma_frames_block, actions[:, b * n:(b + 1) * n],
                                         assignment, mode)
            return v
        # monolithic: full forward over everything generated so far; future
        # blocks hold zeros and cannot leak backward (block causality)
        z_full = np.zeros_like(z_out)
        for bb, zb in enumerate(finalized):
            z_full[:, bb * n:(bb + 1) * n] = zb
        z_full[:, b * n:(b + 1) * n] = z_block
        sigma_full = np.ones(cfg.T, dtype=np.float64)
        sigma_full[:b * n] = sigma_ctx
        sigma_full[b * n:(b + 1) * n] = sigma_frames_block
        fmode = "causal-hub" if mode == "causal-hub" else "dense-causal"
        v_full = forward(model, z_full, sigma_full, actions, mode=fmode,
                         assignment=assignment)
        return v_full[:, b * n:(b + 1) * n]

    for b in range(num_blocks):
        z = rng.split(f"block{b}").normal((P, n, cfg.H, cfg.W, cfg.C_z)).astype(model.dtype)
        for si in range(len(sigmas)):
            sig = sigmas[si]
            sigma_frames_block = np.full(n, sig, dtype=np.float64)
            if b == 0:
                z[:, 0] = first_obs
                sigma_frames_block[0] = sigma_ctx
            v = step_forward(b, z, sigma_frames_block)
            if record_trace:
                velocities.append(v.copy())
            z = z + (sig_path[si + 1] - sig) * v
        if b == 0:
            z[:, 0] = first_obs
        z_out[:, b * n:(b + 1) * n] = z
        finalized.append(z.copy())

        # write the finished block into the caches via one context-level forward
        z_ctx = z
        if sigma_ctx > 0.0:
            eps_ctx = rng.split(f"ctxnoise{b}").normal(z.shape).astype(model.dtype)
            z_ctx = (1.0 - sigma_ctx) * z + sigma_ctx * eps_ctx
            finalized[-1] = z_ctx.copy()  # monolithic history must match the cache content
        ctx_sigma = np.full(n, sigma_ctx, dtype=np.float64)
        if use_cache:
            _, block_kv = _cached_block_forward(model, caches, spec, b, z_ctx, ctx_sigma,
                                                actions[:, b * n:(b + 1) * n], assignment,
                                                mode, collect_kv=True)
            caches.append_block(block_kv, b)
            peak_tokens = max(peak_tokens, max(caches.token_count(i)
                                               for i in range(cfg.layers)))

    return RolloutResult(latents=z_out, velocities=velocities,
                         peak_cache_tokens=peak_tokens if use_cache else None,
                         caches=caches)
