"""Toy multi-agent flow-matching transformer.

Forward pass: per-agent latents are embedded to tokens, learnable hub tokens
are appended per frame, and every layer applies (action bias -> adaptive-norm
attention over the hub topology -> adaptive-norm MLP) with residuals; agent
tokens project back to latent channels, hub tokens are dropped. Noise-level
conditioning enters through a learned scale/shift per layer computed from a
sinusoidal embedding of each frame's sigma.

Gradients are hand-derived; `flow_matching_loss` returns the exact gradient of
the velocity regression loss for every parameter, verified against central
finite differences in the test suite. Cross-agent reductions (hub-query
softmax sums, loss accumulation) run in vertex-index order so jointly
permuting agent streams and their vertex assignment is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import GatherPlan, build_plan, run_plan
from .numerics import RngStream, load_tensor, save_tensor
from .rope import RopeLayout, apply_rotary
from .simplex import (SimplexPool, VertexAssignment, agent_angles, build_simplex_pool,
                      identity_assignment)
from .topology import TopologySpec

# ---------------------------------------------------------------------------
# action formats

GAME_DISCRETE_FIELDS = (
    "inventory", "ESC",
    "hotbar.1", "hotbar.2", "hotbar.3", "hotbar.4", "hotbar.5",
    "hotbar.6", "hotbar.7", "hotbar.8", "hotbar.9",
    "forward", "back", "left", "right",
    "jump", "sneak", "sprint",
    "swapHands",
    "attack", "use", "pickItem", "drop",
)
GAME_CONTINUOUS_FIELDS = ("cameraX", "cameraY")
ROBOT_FIELDS = ("pos_x", "pos_y", "pos_z",
                "rot_6d_0", "rot_6d_1", "rot_6d_2", "rot_6d_3", "rot_6d_4", "rot_6d_5",
                "gripper")

ACTION_DOMAINS = {
    # domain -> (num discrete fields, num continuous fields)
    "game": (len(GAME_DISCRETE_FIELDS), len(GAME_CONTINUOUS_FIELDS)),  # 23 + 2
    "robot": (0, len(ROBOT_FIELDS)),  # 10 continuous
}


def action_dim(domain: str) -> int:
    n_disc, n_cont = ACTION_DOMAINS[domain]
    return n_disc + n_cont


@dataclass(frozen=True)
class ActionFrame:
    """One agent's control vector at one frame."""

    domain: str
    fields: np.ndarray

    def __post_init__(self):
        if self.domain not in ACTION_DOMAINS:
            raise ValueError(f"unknown action domain {self.domain!r}")
        fields = np.asarray(self.fields, dtype=np.float64)
        expected = action_dim(self.domain)
        if fields.shape != (expected,):
            raise ValueError(f"{self.domain} action needs {expected} fields, got {fields.shape}")
        n_disc, _ = ACTION_DOMAINS[self.domain]
        disc = fields[:n_disc]
        if n_disc and not np.isin(disc, (0.0, 1.0)).all():
            raise ValueError(f"discrete fields must be 0/1, got {disc}")
        object.__setattr__(self, "fields", fields)


def pool_raw_actions(raw: np.ndarray, stride: int = 4) -> np.ndarray:
    """Average raw per-video-frame actions down to latent-frame rate."""
    raw = np.asarray(raw)
    t_axis = raw.ndim - 2
    T_raw = raw.shape[t_axis]
    if T_raw % stride != 0:
        raise ValueError(f"{T_raw} raw frames not divisible by stride {stride}")
    shape = raw.shape[:t_axis] + (T_raw // stride, stride) + raw.shape[t_axis + 1:]
    return raw.reshape(shape).mean(axis=t_axis + 1)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ToyModelConfig:
    """Architecture + topology; production-scale values are valid settings."""

    D: int = 64
    layers: int = 2
    heads: int = 2
    rope: RopeLayout = field(default_factory=lambda: RopeLayout(d_t=16, d_p=8, d_h=4, d_w=4))
    V: int = 4
    alpha: float = 1.0
    P: int = 2
    T: int = 6
    H: int = 2
    W: int = 2
    K: int = 2
    n: int = 3
    window: int | None = 24
    C_z: int = 4
    action_domain: str = "game"
    action_branch: int = 32
    action_hidden: int = 64
    mlp_ratio: int = 4
    timesteps: tuple = (1000, 750, 500, 250)
    flow_shift: float = 5.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.D % self.heads != 0:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.head_dim != self.rope.d_head:
            raise ValueError(f"head_dim {self.head_dim} != rope d_head {self.rope.d_head}")
        if self.action_domain not in ACTION_DOMAINS:
            raise ValueError(f"unknown action domain {self.action_domain!r}")

    @property
    def head_dim(self) -> int:
        return self.D // self.heads

    @property
    def L(self) -> int:
        return self.H * self.W

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def mlp_dim(self) -> int:
        return self.D * self.mlp_ratio

    def spec(self, P: int | None = None) -> TopologySpec:
        return TopologySpec(P=self.P if P is None else P, T=self.T, L=self.L, K=self.K,
                            n=self.n, window=self.window, H=self.H, W=self.W)

    def pool(self) -> SimplexPool:
        return build_simplex_pool(self.V, d_half=self.rope.d_p // 2, alpha=self.alpha)


# production-scale settings from the reference deployment, expressible without
# code change (2048 hidden, 28 blocks, 16 heads of 128, K=8 hubs, window 24)
PRODUCTION_SCALE = dict(
    D=2048, layers=28, heads=16, rope=RopeLayout(d_t=64, d_p=32, d_h=16, d_w=16),
    V=4, K=8, window=24, timesteps=(1000, 750, 500, 250), flow_shift=5.0,
    action_branch=128,
)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ToyModel:
    config: ToyModelConfig
    params: dict

    @property
    def dtype(self):
        return self.config.np_dtype


def init_params(config: ToyModelConfig, rng: RngStream) -> dict:
    dt = config.np_dtype
    D, C, M = config.D, config.C_z, config.mlp_dim
    n_disc, n_cont = ACTION_DOMAINS[config.action_domain]
    B, F = config.action_branch, config.action_hidden

    def mat(label, shape, std):
        return (rng.split(label).normal(shape, dtype=np.float64) * std).astype(dt)

    p = {
        "embed.w": mat("embed.w", (C, D), C ** -0.5),
        "embed.b": np.zeros(D, dtype=dt),
        "head.w": mat("head.w", (D, C), 0.02),
        "head.b": np.zeros(C, dtype=dt),
        "sigma.w1": mat("sigma.w1", (D, D), D ** -0.5),
        "sigma.b1": np.zeros(D, dtype=dt),
        "sigma.w2": mat("sigma.w2", (D, D), D ** -0.5),
        "sigma.b2": np.zeros(D, dtype=dt),
        "act.cont.w": mat("act.cont.w", (n_cont, B), n_cont ** -0.5),
        "act.cont.b": np.zeros(B, dtype=dt),
        "act.fuse.w1": mat("act.fuse.w1", (B * (2 if n_disc else 1), F), (2 * B) ** -0.5),
        "act.fuse.b1": np.zeros(F, dtype=dt),
        "act.fuse.w2": mat("act.fuse.w2", (F, D), F ** -0.5),
        "act.fuse.b2": np.zeros(D, dtype=dt),
    }
    if n_disc:
        p["act.disc.w"] = mat("act.disc.w", (n_disc, B), n_disc ** -0.5)
        p["act.disc.b"] = np.zeros(B, dtype=dt)
    if config.K:
        p["hub.tokens"] = mat("hub.tokens", (config.K, D), 0.5)
    for i in range(config.layers):
        lp = {
            f"layer{i}.act.w": mat(f"layer{i}.act.w", (D, D), 0.02),
            f"layer{i}.act.b": np.zeros(D, dtype=dt),
            f"layer{i}.mod.w": mat(f"layer{i}.mod.w", (D, 4 * D), 0.02),
            f"layer{i}.mod.b": np.zeros(4 * D, dtype=dt),
            f"layer{i}.mlp.w1": mat(f"layer{i}.mlp.w1", (D, M), D ** -0.5),
            f"layer{i}.mlp.b1": np.zeros(M, dtype=dt),
            f"layer{i}.mlp.w2": mat(f"layer{i}.mlp.w2", (M, D), M ** -0.5),
            f"layer{i}.mlp.b2": np.zeros(D, dtype=dt),
        }
        for name in ("wq", "wk", "wv", "wo"):
            lp[f"layer{i}.attn.{name}"] = mat(f"layer{i}.attn.{name}", (D, D), D ** -0.5)
            lp[f"layer{i}.attn.b{name[-1]}"] = np.zeros(D, dtype=dt)
        p.update(lp)
    return p


def build_model(config: ToyModelConfig, seed: int = 0) -> ToyModel:
    return ToyModel(config=config, params=init_params(config, RngStream(seed).split("init")))


def save_checkpoint(model: ToyModel, out_dir, seed: int = 0, step: int = 0) -> None:
    """JSON manifest (config, seed, step) plus one tensor file per parameter group."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["rope"] = {"d_t": model.config.rope.d_t, "d_p": model.config.rope.d_p,
                   "d_h": model.config.rope.d_h, "d_w": model.config.rope.d_w,
                   "base": model.config.rope.base,
                   "t_freqs": model.config.rope.t_freqs.tolist()}
    manifest = {
        "config": cfg,
        "seed": seed,
        "step": step,
        "params": {name: name.replace("/", "_") + ".bin" for name in sorted(model.params)},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    for name, filename in manifest["params"].items():
        save_tensor(out / filename, model.params[name])


def load_checkpoint(ckpt_dir) -> tuple:
    ckpt = Path(ckpt_dir)
    with open(ckpt / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = dict(manifest["config"])
    rope_cfg = cfg.pop("rope")
    t_freqs = np.asarray(rope_cfg.pop("t_freqs"), dtype=np.float64)
    cfg["rope"] = RopeLayout(t_freqs=t_freqs, **rope_cfg)
    cfg["timesteps"] = tuple(cfg["timesteps"])
    config = ToyModelConfig(**cfg)
    params = {name: load_tensor(ckpt / filename)
              for name, filename in manifest["params"].items()}
    model = ToyModel(config=config, params=params)
    return model, manifest


# ---------------------------------------------------------------------------
# primitive ops (forward + hand-derived backward)

def _linear_fwd(x, w, b):
    return x @ w + b, (x, w)


def _linear_bwd(dy, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


_LN_EPS = 1e-6


def _layernorm_fwd(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def _layernorm_bwd(dy, cache):
    xhat, inv = cache
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * xhat).mean(axis=-1, keepdims=True)
    return inv * (dy - m1 - xhat * m2)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _grouped_attention_train_fwd(q, k, v, plan: GatherPlan, scale):
    """Numpy grouped attention that keeps softmax weights for the backward pass."""
    out = np.zeros_like(q)
    saved = []
    for g in range(plan.num_groups):
        qi, ki = plan.group(g)
        if len(qi) == 0:
            continue
        logits = np.matmul(q[:, qi], k[:, ki].transpose(0, 2, 1)) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        out[:, qi] = np.matmul(w, v[:, ki])
        saved.append((qi, ki, w))
    return out, saved


def _grouped_attention_train_bwd(dout, q, k, v, saved, scale):
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for qi, ki, w in saved:
        dog = dout[:, qi]
        dv[:, ki] += np.matmul(w.transpose(0, 2, 1), dog)
        ds = np.matmul(dog, v[:, ki].transpose(0, 2, 1))
        dlog = w * (ds - (ds * w).sum(axis=-1, keepdims=True))
        dq[:, qi] += np.matmul(dlog, k[:, ki]) * scale
        dk[:, ki] += np.matmul(dlog.transpose(0, 2, 1), q[:, qi]) * scale
    return dq, dk, dv


def _split_heads(x, heads):
    S, D = x.shape
    return np.ascontiguousarray(x.reshape(S, heads, D // heads).transpose(1, 0, 2))


def _merge_heads(x):
    heads, S, hd = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(S, heads * hd)


def sinusoidal_features(values: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Standard timestep embedding of shape (len(values), dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1).astype(dtype)


# ---------------------------------------------------------------------------
# action encoder

def _split_action_fields(config: ToyModelConfig, flat: np.ndarray):
    n_disc, n_cont = ACTION_DOMAINS[config.action_domain]
    if flat.shape[-1] != n_disc + n_cont:
        raise ValueError(f"{config.action_domain} actions need {n_disc + n_cont} fields, "
                         f"got {flat.shape[-1]}")
    return flat[..., :n_disc], flat[..., n_disc:]


def _encode_actions_fwd(model: ToyModel, flat: np.ndarray):
    """flat: (N, action_dim) -> features (N, D); shared across agents."""
    p = model.params
    cfg = model.config
    disc, cont = _split_action_fields(cfg, np.asarray(flat, dtype=model.dtype))
    hc, c_hc = _linear_fwd(cont, p["act.cont.w"], p["act.cont.b"])
    if disc.shape[-1]:
        hd, c_hd = _linear_fwd(disc, p["act.disc.w"], p["act.disc.b"])
        h = np.concatenate([hd, hc], axis=-1)
    else:
        c_hd = None
        h = hc
    f1, c_f1 = _linear_fwd(h, p["act.fuse.w1"], p["act.fuse.b1"])
    g1, c_g1 = _gelu_fwd(f1)
    u, c_u = _linear_fwd(g1, p["act.fuse.w2"], p["act.fuse.b2"])
    return u, (c_hd, c_hc, c_f1, c_g1, c_u, disc.shape[-1])


def _encode_actions_bwd(du, cache, grads):
    c_hd, c_hc, c_f1, c_g1, c_u, n_disc = cache
    dg1, dw2, db2 = _linear_bwd(du, c_u)
    grads["act.fuse.w2"] += dw2
    grads["act.fuse.b2"] += db2
    df1 = _gelu_bwd(dg1, c_g1)
    dh, dw1, db1 = _linear_bwd(df1, c_f1)
    grads["act.fuse.w1"] += dw1
    grads["act.fuse.b1"] += db1
    if n_disc:
        B = dh.shape[-1] // 2
        dhd, dhc = dh[..., :B], dh[..., B:]
        _, dwd, dbd = _linear_bwd(dhd, c_hd)
        grads["act.disc.w"] += dwd
        grads["act.disc.b"] += dbd
    else:
        dhc = dh
    _, dwc, dbc = _linear_bwd(dhc, c_hc)
    grads["act.cont.w"] += dwc
    grads["act.cont.b"] += dbc


def encode_action(model: ToyModel, frame) -> np.ndarray:
    """Feature vector of one action; identical for any agent issuing it."""
    if isinstance(frame, ActionFrame):
        if frame.domain != model.config.action_domain:
            raise ValueError(f"model encodes {model.config.action_domain!r} actions, "
                             f"got {frame.domain!r}")
        fields = frame.fields
    else:
        fields = np.asarray(frame)
        if fields.shape != (action_dim(model.config.action_domain),):
            raise ValueError(f"expected {action_dim(model.config.action_domain)} fields, "
                             f"got shape {fields.shape}")
    u, _ = _encode_actions_fwd(model, fields[None])
    return u[0]


def action_bias(model: ToyModel, layer: int, u: np.ndarray) -> np.ndarray:
    """Layer-specific projection of action features: beta = g_layer(u)."""
    p = model.params
    return u @ p[f"layer{layer}.act.w"] + p[f"layer{layer}.act.b"]


def inject_action_bias(x: np.ndarray, beta: np.ndarray, spec: TopologySpec) -> np.ndarray:
    """Add beta[p, t] to every spatial token of agent p at frame t; hubs untouched."""
    P, T, L = spec.P, spec.T, spec.L
    if beta.shape[:2] != (P, T):
        raise ValueError(f"beta leading shape {beta.shape[:2]} != (P, T) = ({P}, {T})")
    out = x.copy()
    agent = out[:P * T * L].reshape(P, T, L, -1)
    agent += beta[:, :, None, :]
    return out


# ---------------------------------------------------------------------------
# rope angle tables

def _token_angles(config: ToyModelConfig, spec: TopologySpec, pool: SimplexPool,
                  assignment: VertexAssignment, frames: np.ndarray, with_hubs: bool):
    """Rotation angles for agent tokens of the given frames (P, F*L, pairs) and
    hub tokens (F*K, pairs)."""
    lay = config.rope
    n_t, n_p, n_h = lay.d_t // 2, lay.d_p // 2, lay.d_h // 2
    F = len(frames)
    L = spec.L
    h_idx, w_idx = np.divmod(np.arange(L), spec.W)

    agent = np.zeros((spec.P, F * L, lay.num_pairs), dtype=np.float64)
    t_band = frames[:, None, None] * lay.t_freqs[None, None, :]  # (F, 1, n_t)
    agent[:, :, :n_t] = np.broadcast_to(t_band, (F, L, n_t)).reshape(F * L, n_t)
    theta = agent_angles(pool, assignment)  # (P, d_half)
    agent[:, :, n_t:n_t + pool.d_half] = theta[:, None, :]
    spat_h = h_idx[:, None] * lay.h_freqs[None, :]
    spat_w = w_idx[:, None] * lay.w_freqs[None, :]
    agent[:, :, n_t + n_p:n_t + n_p + n_h] = np.tile(spat_h, (F, 1))
    agent[:, :, n_t + n_p + n_h:] = np.tile(spat_w, (F, 1))

    hub = None
    if with_hubs and spec.K:
        hub = np.zeros((F * spec.K, lay.num_pairs), dtype=np.float64)
        hub[:, :n_t] = np.repeat(frames, spec.K)[:, None] * lay.t_freqs[None, :]
    return agent, hub


def _sequence_angles(config, spec, pool, assignment, frames, with_hubs):
    """Flat (S, pairs) angle table in sequence order."""
    agent, hub = _token_angles(config, spec, pool, assignment, frames, with_hubs)
    parts = [agent.reshape(-1, agent.shape[-1])]
    if hub is not None:
        parts.append(hub)
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# forward / backward

def _expand_sigma(spec: TopologySpec, sigma) -> np.ndarray:
    """Accept per-block or per-frame sigma; return per-frame (T,) float64."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape == (spec.num_blocks,):
        return np.repeat(sigma, spec.n)
    if sigma.shape == (spec.T,):
        return sigma
    raise ValueError(f"sigma must have {spec.num_blocks} (per block) or {spec.T} (per frame) "
                     f"entries, got {sigma.shape}")


def _vertex_order(assignment: VertexAssignment) -> tuple:
    """Agent slots sorted by assigned vertex: the fixed cross-agent gather order."""
    return tuple(int(i) for i in np.argsort(np.asarray(assignment.vertex_of)))


def forward(model: ToyModel, z_sigma: np.ndarray, sigma, actions: np.ndarray,
            mode: str = "causal-hub", assignment: VertexAssignment | None = None,
            train: bool = False):
    """Velocity prediction for a full multi-agent sequence.

    z_sigma: (P, T, H, W, C_z); sigma: per-block or per-frame noise levels;
    actions: (P, T, action_dim). Returns (P, T, H, W, C_z), plus a tape for
    backward() when train=True.
    """
    cfg = model.config
    p = model.params
    dt = model.dtype
    z_sigma = np.asarray(z_sigma, dtype=dt)
    P = z_sigma.shape[0]
    spec = cfg.spec(P)
    if mode in ("bidirectional-dense", "dense-causal"):
        spec = replace(spec, K=0)
    elif mode != "causal-hub":
        raise ValueError(f"unknown forward mode {mode!r}")
    if z_sigma.shape != (P, cfg.T, cfg.H, cfg.W, cfg.C_z):
        raise ValueError(f"latents shaped {z_sigma.shape}, expected "
                         f"{(P, cfg.T, cfg.H, cfg.W, cfg.C_z)}")
    if actions.shape[:2] != (P, cfg.T):
        raise ValueError(f"actions shaped {actions.shape}, need ({P}, {cfg.T}, ...)")
    if assignment is None:
        assignment = identity_assignment(P)
    if assignment.num_agents != P:
        raise ValueError(f"assignment covers {assignment.num_agents} agents, batch has {P}")
    sigma_frames = _expand_sigma(spec, sigma)

    T, L, K, D = cfg.T, cfg.L, spec.K, cfg.D
    nA = P * T * L
    S = nA + T * K
    order = _vertex_order(assignment)
    plan = build_plan(spec, mode, order)
    pool = cfg.pool()

    # token embedding + hub tokens
    za = z_sigma.reshape(nA, cfg.C_z)
    xa, c_embed = _linear_fwd(za, p["embed.w"], p["embed.b"])
    if K:
        hub_x = np.tile(p["hub.tokens"], (T, 1)).astype(dt)
        x = np.concatenate([xa, hub_x], axis=0)
    else:
        x = xa

    # per-frame sigma conditioning
    sig_feats = sinusoidal_features(sigma_frames * 1000.0, D, dt)
    c1_pre, c_sig1 = _linear_fwd(sig_feats, p["sigma.w1"], p["sigma.b1"])
    c1, c_sigg = _gelu_fwd(c1_pre)
    cvec, c_sig2 = _linear_fwd(c1, p["sigma.w2"], p["sigma.b2"])  # (T, D)

    # frame id of every token
    frame_ids = np.empty(S, dtype=np.int64)
    frame_ids[:nA] = np.tile(np.repeat(np.arange(T), L), P)
    if K:
        frame_ids[nA:] = np.repeat(np.arange(T), K)

    # shared action features
    acts = np.asarray(actions, dtype=dt).reshape(P * T, -1)
    u, c_act = _encode_actions_fwd(model, acts)  # (P*T, D)

    # rotary angles (agent band zero for hub rows)
    angles = _sequence_angles(cfg, spec, pool, assignment, np.arange(T), with_hubs=K > 0)
    angles = angles[None].astype(dt)  # (1, S, pairs)

    scale = 1.0 / np.sqrt(cfg.head_dim)
    tape = [] if train else None
    for i in range(cfg.layers):
        # action bias on agent tokens
        beta, c_beta = _linear_fwd(u, p[f"layer{i}.act.w"], p[f"layer{i}.act.b"])
        x_b = x.copy()
        x_b[:nA] += np.repeat(beta, L, axis=0)

        mod, c_mod = _linear_fwd(cvec, p[f"layer{i}.mod.w"], p[f"layer{i}.mod.b"])
        s1, h1, s2, h2 = np.split(mod, 4, axis=-1)  # (T, D) each

        ln1, c_ln1 = _layernorm_fwd(x_b)
        xm = ln1 * (1.0 + s1[frame_ids]) + h1[frame_ids]
        qf, c_q = _linear_fwd(xm, p[f"layer{i}.attn.wq"], p[f"layer{i}.attn.bq"])
        kf, c_k = _linear_fwd(xm, p[f"layer{i}.attn.wk"], p[f"layer{i}.attn.bk"])
        vf, c_v = _linear_fwd(xm, p[f"layer{i}.attn.wv"], p[f"layer{i}.attn.bv"])
        q = apply_rotary(_split_heads(qf, cfg.heads), angles)
        k = apply_rotary(_split_heads(kf, cfg.heads), angles)
        v = _split_heads(vf, cfg.heads)
        if train:
            y, saved_attn = _grouped_attention_train_fwd(q, k, v, plan, scale)
        else:
            y = run_plan(np.ascontiguousarray(q), np.ascontiguousarray(k),
                         np.ascontiguousarray(v), plan, scale)
            saved_attn = None
        ym = _merge_heads(y)
        attn_out, c_o = _linear_fwd(ym, p[f"layer{i}.attn.wo"], p[f"layer{i}.attn.bo"])
        x_a = x_b + attn_out

        ln2, c_ln2 = _layernorm_fwd(x_a)
        xm2 = ln2 * (1.0 + s2[frame_ids]) + h2[frame_ids]
        m1_pre, c_m1 = _linear_fwd(xm2, p[f"layer{i}.mlp.w1"], p[f"layer{i}.mlp.b1"])
        m1, c_mg = _gelu_fwd(m1_pre)
        m2, c_m2 = _linear_fwd(m1, p[f"layer{i}.mlp.w2"], p[f"layer{i}.mlp.b2"])
        x_new = x_a + m2

        if train:
            tape.append(dict(c_beta=c_beta, c_mod=c_mod, c_ln1=c_ln1, c_q=c_q, c_k=c_k,
                             c_v=c_v, q=q, k=k, v=v, saved_attn=saved_attn, c_o=c_o,
                             c_ln2=c_ln2, c_m1=c_m1, c_mg=c_mg, c_m2=c_m2,
                             s1=s1, s2=s2, ln1=ln1, ln2=ln2))
        x = x_new

    lnf, c_lnf = _layernorm_fwd(x[:nA])
    out_flat, c_head = _linear_fwd(lnf, p["head.w"], p["head.b"])
    out = out_flat.reshape(P, T, cfg.H, cfg.W, cfg.C_z)
    if not train:
        return out
    ctx = dict(tape=tape, c_embed=c_embed, c_act=c_act, c_sig1=c_sig1, c_sigg=c_sigg,
               c_sig2=c_sig2, c_lnf=c_lnf, c_head=c_head, frame_ids=frame_ids, plan=plan,
               angles=angles, nA=nA, S=S, P=P, spec=spec, scale=scale, mode=mode)
    return out, ctx


def backward(model: ToyModel, ctx: dict, dout: np.ndarray) -> dict:
    """Parameter gradients from d(loss)/d(output); mirrors forward exactly."""
    cfg = model.config
    p = model.params
    nA, S, P = ctx["nA"], ctx["S"], ctx["P"]
    T, L, K, D = cfg.T, cfg.L, ctx["spec"].K, cfg.D
    frame_ids = ctx["frame_ids"]
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    dflat = np.asarray(dout, dtype=model.dtype).reshape(nA, cfg.C_z)
    dlnf, dw, db = _linear_bwd(dflat, ctx["c_head"])
    grads["head.w"] += dw
    grads["head.b"] += db
    dx = np.zeros((S, D), dtype=model.dtype)
    dx[:nA] = _layernorm_bwd(dlnf, ctx["c_lnf"])

    du_total = np.zeros((P * T, D), dtype=model.dtype)
    dc_total = np.zeros((T, D), dtype=model.dtype)

    def frame_sum(arr):
        """Sum token-level (S, D) gradient onto per-frame (T, D)."""
        agent = arr[:nA].reshape(P, T, L, D).sum(axis=(0, 2))
        if K:
            agent = agent + arr[nA:].reshape(T, K, D).sum(axis=1)
        return agent

    for i in reversed(range(cfg.layers)):
        t = ctx["tape"][i]
        # mlp sublayer
        dm2 = dx
        dm1, dw, db = _linear_bwd(dm2, t["c_m2"])
        grads[f"layer{i}.mlp.w2"] += dw
        grads[f"layer{i}.mlp.b2"] += db
        dm1_pre = _gelu_bwd(dm1, t["c_mg"])
        dxm2, dw, db = _linear_bwd(dm1_pre, t["c_m1"])
        grads[f"layer{i}.mlp.w1"] += dw
        grads[f"layer{i}.mlp.b1"] += db
        dln2 = dxm2 * (1.0 + t["s2"][frame_ids])
        ds2 = frame_sum(dxm2 * t["ln2"])
        dh2 = frame_sum(dxm2)
        dx_a = dx + _layernorm_bwd(dln2, t["c_ln2"])

        # attention sublayer
        dattn = dx_a
        dym, dw, db = _linear_bwd(dattn, t["c_o"])
        grads[f"layer{i}.attn.wo"] += dw
        grads[f"layer{i}.attn.bo"] += db
        dy = np.ascontiguousarray(
            dym.reshape(S, cfg.heads, cfg.head_dim).transpose(1, 0, 2))
        dq, dk, dv = _grouped_attention_train_bwd(dy, t["q"], t["k"], t["v"],
                                                  t["saved_attn"], ctx["scale"])
        dqf = _merge_heads(apply_rotary(dq, -ctx["angles"]))
        dkf = _merge_heads(apply_rotary(dk, -ctx["angles"]))
        dvf = _merge_heads(dv)
        dxm = np.zeros((S, D), dtype=model.dtype)
        for dpart, cache, wn, bn in ((dqf, t["c_q"], "wq", "bq"), (dkf, t["c_k"], "wk", "bk"),
                                     (dvf, t["c_v"], "wv", "bv")):
            dxp, dw, db = _linear_bwd(dpart, cache)
            grads[f"layer{i}.attn.{wn}"] += dw
            grads[f"layer{i}.attn.{bn}"] += db
            dxm += dxp
        dln1 = dxm * (1.0 + t["s1"][frame_ids])
        ds1 = frame_sum(dxm * t["ln1"])
        dh1 = frame_sum(dxm)
        dx_b = dx_a + _layernorm_bwd(dln1, t["c_ln1"])

        # modulation params and sigma pathway
        dmod = np.concatenate([ds1, dh1, ds2, dh2], axis=-1)
        dcvec, dw, db = _linear_bwd(dmod, t["c_mod"])
        grads[f"layer{i}.mod.w"] += dw
        grads[f"layer{i}.mod.b"] += db
        dc_total += dcvec

        # action bias
        dbeta = dx_b[:nA].reshape(P * T, L, D).sum(axis=1)
        du, dw, db = _linear_bwd(dbeta, t["c_beta"])
        grads[f"layer{i}.act.w"] += dw
        grads[f"layer{i}.act.b"] += db
        du_total += du

        dx = dx_b

    # sigma conditioning MLP
    dc1, dw, db = _linear_bwd(dc_total, ctx["c_sig2"])
    grads["sigma.w2"] += dw
    grads["sigma.b2"] += db
    dc1_pre = _gelu_bwd(dc1, ctx["c_sigg"])
    _, dw, db = _linear_bwd(dc1_pre, ctx["c_sig1"])
    grads["sigma.w1"] += dw
    grads["sigma.b1"] += db

    # action encoder
    _encode_actions_bwd(du_total, ctx["c_act"], grads)

    # hub tokens and embedding
    if K:
        grads["hub.tokens"] += dx[nA:].reshape(T, K, D).sum(axis=0)
    _, dw, db = _linear_bwd(dx[:nA], ctx["c_embed"])
    grads["embed.w"] += dw
    grads["embed.b"] += db
    return grads


def _block_tokens_forward(model: ToyModel, spec: TopologySpec, b: int, z_block: np.ndarray,
                          sigma_frames: np.ndarray, actions_block: np.ndarray,
                          assignment: VertexAssignment, mode: str, attention_fn,
                          collect_kv: bool = False):
    """Forward of one temporal block's tokens with attention delegated to the caller.

    Runs the identical per-layer math as forward(), but only over the current
    block's P*n*L agent tokens (+ n*K hub tokens); attention_fn(layer, q, k, v)
    supplies the context (e.g. KV caches). Returns (velocity for the block,
    per-layer {stream: (k, v)} when collect_kv).
    """
    cfg = model.config
    p = model.params
    dt = model.dtype
    P, n, L, K, D = spec.P, spec.n, spec.L, spec.K, cfg.D
    nA = P * n * L
    S = nA + n * K
    frames = np.arange(b * n, (b + 1) * n)
    pool = cfg.pool()

    za = np.asarray(z_block, dtype=dt).reshape(nA, cfg.C_z)
    x, _ = _linear_fwd(za, p["embed.w"], p["embed.b"])
    if K:
        x = np.concatenate([x, np.tile(p["hub.tokens"], (n, 1)).astype(dt)], axis=0)

    sig_feats = sinusoidal_features(np.asarray(sigma_frames) * 1000.0, D, dt)
    c1, _ = _linear_fwd(sig_feats, p["sigma.w1"], p["sigma.b1"])
    c1, _ = _gelu_fwd(c1)
    cvec, _ = _linear_fwd(c1, p["sigma.w2"], p["sigma.b2"])  # (n, D)

    frame_ids = np.empty(S, dtype=np.int64)
    frame_ids[:nA] = np.tile(np.repeat(np.arange(n), L), P)
    if K:
        frame_ids[nA:] = np.repeat(np.arange(n), K)

    acts = np.asarray(actions_block, dtype=dt).reshape(P * n, -1)
    u, _ = _encode_actions_fwd(model, acts)

    angles = _sequence_angles(cfg, spec, pool, assignment, frames, with_hubs=K > 0)
    angles = angles[None].astype(dt)

    block_kv = [] if collect_kv else None
    for i in range(cfg.layers):
        beta, _ = _linear_fwd(u, p[f"layer{i}.act.w"], p[f"layer{i}.act.b"])
        x_b = x.copy()
        x_b[:nA] += np.repeat(beta, L, axis=0)

        mod, _ = _linear_fwd(cvec, p[f"layer{i}.mod.w"], p[f"layer{i}.mod.b"])
        s1, h1, s2, h2 = np.split(mod, 4, axis=-1)

        ln1, _ = _layernorm_fwd(x_b)
        xm = ln1 * (1.0 + s1[frame_ids]) + h1[frame_ids]
        qf, _ = _linear_fwd(xm, p[f"layer{i}.attn.wq"], p[f"layer{i}.attn.bq"])
        kf, _ = _linear_fwd(xm, p[f"layer{i}.attn.wk"], p[f"layer{i}.attn.bk"])
        vf, _ = _linear_fwd(xm, p[f"layer{i}.attn.wv"], p[f"layer{i}.attn.bv"])
        q = np.ascontiguousarray(apply_rotary(_split_heads(qf, cfg.heads), angles))
        k = np.ascontiguousarray(apply_rotary(_split_heads(kf, cfg.heads), angles))
        v = _split_heads(vf, cfg.heads)
        if collect_kv:
            layer_kv = {}
            for pa in range(P):
                sl = slice(pa * n * L, (pa + 1) * n * L)
                layer_kv[pa] = (np.ascontiguousarray(k[:, sl]), np.ascontiguousarray(v[:, sl]))
            if K:
                layer_kv["hub"] = (np.ascontiguousarray(k[:, nA:]),
                                   np.ascontiguousarray(v[:, nA:]))
            block_kv.append(layer_kv)
        y = attention_fn(i, q, k, v)
        attn_out, _ = _linear_fwd(_merge_heads(y), p[f"layer{i}.attn.wo"],
                                  p[f"layer{i}.attn.bo"])
        x_a = x_b + attn_out

        ln2, _ = _layernorm_fwd(x_a)
        xm2 = ln2 * (1.0 + s2[frame_ids]) + h2[frame_ids]
        m1, _ = _linear_fwd(xm2, p[f"layer{i}.mlp.w1"], p[f"layer{i}.mlp.b1"])
        m1, _ = _gelu_fwd(m1)
        m2, _ = _linear_fwd(m1, p[f"layer{i}.mlp.w2"], p[f"layer{i}.mlp.b2"])
        x = x_a + m2

    lnf, _ = _layernorm_fwd(x[:nA])
    out, _ = _linear_fwd(lnf, p["head.w"], p["head.b"])
    return out.reshape(P, n, cfg.H, cfg.W, cfg.C_z), block_kv


# ---------------------------------------------------------------------------
# flow matching

def flow_interpolant(z0: np.ndarray, eps: np.ndarray, sigma) -> np.ndarray:
    """Linear noise path (1 - sigma) z0 + sigma eps; sigma scalar or per-frame."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ")
    sigma = np.asarray(sigma, dtype=z0.dtype)
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ValueError("sigma must lie in [0, 1]")
    if sigma.ndim == 1:  # per-frame, broadcast over (..., T, H, W, C)
        sigma = sigma.reshape((1,) * (z0.ndim - 4) + (-1, 1, 1, 1))
    return (1.0 - sigma) * z0 + sigma * eps


def diffusion_forcing_noise(rng: RngStream, num_blocks: int) -> np.ndarray:
    """Independent U(0,1) noise level per temporal block."""
    if num_blocks < 1:
        raise ValueError(f"need at least one block, got {num_blocks}")
    return rng.uniform((num_blocks,))


def velocity_mse(pred: np.ndarray, target: np.ndarray, assignment: VertexAssignment):
    """Mean squared error accumulated per agent in vertex order (bit-stable
    under joint stream/assignment permutation). Returns (loss, dpred)."""
    err = pred - target
    order = _vertex_order(assignment)
    total = 0.0
    for pslot in order:
        total += float(np.sum(err[pslot].astype(np.float64) ** 2))
    numel = err.size
    return total / numel, (2.0 / numel) * err


def flow_matching_loss(model: ToyModel, batch: dict, mode: str = "causal-hub"):
    """Loss and exact parameter gradients for one batch.

    batch keys: z0 (B,P,T,H,W,C), eps (same), actions (B,P,T,A),
    sigma (B, num_blocks) and assignment.
    """
    z0 = np.asarray(batch["z0"])
    eps = np.asarray(batch["eps"])
    actions = np.asarray(batch["actions"])
    sigma = np.asarray(batch["sigma"])
    assignment = batch["assignment"]
    Bsz = z0.shape[0]
    loss = 0.0
    grads = None
    spec = model.config.spec(z0.shape[1])
    for b in range(Bsz):
        sig_frames = _expand_sigma(spec, sigma[b])
        z_sig = flow_interpolant(z0[b], eps[b], sig_frames)
        pred, ctx = forward(model, z_sig, sig_frames, actions[b], mode=mode,
                            assignment=assignment, train=True)
        target = (eps[b] - z0[b]).astype(pred.dtype)
        sample_loss, dpred = velocity_mse(pred, target, assignment)
        loss += sample_loss / Bsz
        g = backward(model, ctx, dpred / Bsz)
        if grads is None:
            grads = g
        else:
            for name in grads:
                grads[name] += g[name]
    return loss, grads


# ---------------------------------------------------------------------------
# synthetic shared world

class SynthWorld:
    """Toy shared environment: a global state driven by the sum of all agents'
    continuous actions, per-agent positions driven by own actions, and a fixed
    random linear rendering of (global state, own action, own position) into
    each agent's latent frames. One agent's actions reach other agents' latents
    only through the global state, strictly after the acting frame.
    """

    STATE_DIM = 8
    POS_DIM = 4
    RENDER_SCALE = 2.5  # latent variance well above the unit noise variance

    def __init__(self, config: ToyModelConfig, rng: RngStream):
        self.config = config
        n_disc, n_cont = ACTION_DOMAINS[config.action_domain]
        self.n_disc, self.n_cont = n_disc, n_cont
        d_g, d_x = self.STATE_DIM, self.POS_DIM
        feat = d_g + d_x + n_cont
        out = config.L * config.C_z
        self.w_state = rng.split("state").normal((d_g, d_g), dtype=np.float64) / np.sqrt(d_g)
        self.w_act = rng.split("act").normal((n_cont, d_g), dtype=np.float64) / np.sqrt(n_cont)
        self.w_pos = rng.split("pos").normal((n_cont, d_x), dtype=np.float64) / np.sqrt(n_cont)
        self.w_render = (rng.split("render").normal((feat, out), dtype=np.float64)
                         * (self.RENDER_SCALE / np.sqrt(feat)))

    def sample_actions(self, rng: RngStream, P: int) -> np.ndarray:
        T = self.config.T
        cont = rng.split("cont").normal((P, T, self.n_cont), dtype=np.float64) * 0.5
        if self.n_disc:
            disc = (rng.split("disc").uniform((P, T, self.n_disc)) < 0.2).astype(np.float64)
            return np.concatenate([disc, cont], axis=-1)
        return cont

    def sample_init(self, rng: RngStream, P: int):
        g0 = rng.split("g0").normal((self.STATE_DIM,), dtype=np.float64) * 0.5
        x0 = rng.split("x0").normal((P, self.POS_DIM), dtype=np.float64) * 0.5
        return g0, x0

    def latents_for(self, actions: np.ndarray, g0: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """Deterministic render of the world under the given actions."""
        cfg = self.config
        P, T = actions.shape[:2]
        cont = actions[..., self.n_disc:]
        g = g0.copy()
        x = x0.copy()
        z = np.zeros((P, T, cfg.H, cfg.W, cfg.C_z), dtype=np.float64)
        for t in range(T):
            feats = np.concatenate(
                [np.broadcast_to(g, (P, self.STATE_DIM)), x, cont[:, t]], axis=-1)
            z[:, t] = (feats @ self.w_render).reshape(P, cfg.H, cfg.W, cfg.C_z)
            # action at frame t takes effect from frame t+1 on
            g = g + np.tanh(g @ self.w_state) * (cont[:, t].sum(axis=0) @ self.w_act)
            x = x + cont[:, t] @ self.w_pos
        return z

    def sample_batch(self, rng: RngStream, batch_size: int, P: int | None = None):
        P = self.config.P if P is None else P
        z0 = []
        acts = []
        for b in range(batch_size):
            r = rng.split(f"sample{b}")
            actions = self.sample_actions(r.split("actions"), P)
            g0, x0 = self.sample_init(r.split("init"), P)
            z0.append(self.latents_for(actions, g0, x0))
            acts.append(actions)
        return np.stack(z0), np.stack(acts)


def synth_world_batch(rng: RngStream, config: ToyModelConfig, batch_size: int = 4):
    """(Z0, actions) from a synthetic shared world seeded entirely by rng."""
    world = SynthWorld(config, rng.split("world"))
    return world.sample_batch(rng.split("draws"), batch_size)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    losses: list
    model: ToyModel
    seed: int
    first_batch: dict | None = None  # the step-0 batch, kept for controlled before/after evals

    def metrics_csv(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i},{loss:.8f}" for i, loss in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def train_toy(config: ToyModelConfig, steps: int, lr: float = 3e-4, momentum: float = 0.9,
              batch_size: int = 4, seed: int = 0, mode: str = "causal-hub",
              log_every: int = 0) -> TrainResult:
    """SGD-with-momentum loop over flow_matching_loss with diffusion-forcing noise."""
    from .simplex import sample_assignment

    rng = RngStream(seed)
    model = build_model(config, seed=seed)
    world = SynthWorld(config, rng.split("world"))
    vel = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    num_blocks = config.T // config.n
    losses = []
    first_batch = None
    for step in range(steps):
        r = rng.split(f"step{step}")
        z0, actions = world.sample_batch(r.split("data"), batch_size)
        eps = r.split("eps").normal(z0.shape, dtype=np.float64)
        sigma = np.stack([diffusion_forcing_noise(r.split(f"sigma{b}"), num_blocks)
                          for b in range(batch_size)])
        assignment = sample_assignment(config.P, config.V, r.split("assign"))
        batch = dict(z0=z0, eps=eps, actions=actions, sigma=sigma, assignment=assignment)
        if step == 0:
            first_batch = batch
        loss, grads = flow_matching_loss(model, batch, mode=mode)
        for name in model.params:
            vel[name] = momentum * vel[name] - lr * grads[name]
            model.params[name] = model.params[name] + vel[name]
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step}: loss {loss:.6f}")
    return TrainResult(losses=losses, model=model, seed=seed, first_batch=first_batch)
