"""Token sequence layout and attention mask algebra.

A sequence is P*T*L agent tokens (ordered agent-major, then frame, then
spatial) followed by T*K hub tokens (frame-major, then hub slot). Masks are
dense boolean matrices; they exist for reference/verification at desk scale —
the sparse execution path consumes the TopologySpec directly and never
materializes them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rope import HUB, TokenCoordinate


@dataclass(frozen=True)
class TopologySpec:
    """Complete description of one multi-agent token topology."""

    P: int  # agent streams
    T: int  # latent frames
    L: int  # spatial tokens per frame (H*W)
    K: int  # hub tokens per frame
    n: int  # frames per temporal block
    window: int | None = 24  # local attention window in latent frames; None = unbounded
    H: int | None = None  # optional spatial split; defaults to 1 x L
    W: int | None = None

    def __post_init__(self):
        if self.P < 1 or self.L < 1 or self.K < 0 or self.n < 1:
            raise ValueError(f"invalid topology counts: {self}")
        if self.T % self.n != 0:
            raise ValueError(f"T={self.T} not divisible by block size n={self.n}")
        if self.window is not None and self.window < self.n:
            raise ValueError(f"window={self.window} frames cannot cover one block of n={self.n}")
        if self.H is None:
            object.__setattr__(self, "H", 1)
            object.__setattr__(self, "W", self.L)
        if self.H * self.W != self.L:
            raise ValueError(f"H*W = {self.H}*{self.W} != L = {self.L}")

    @property
    def num_blocks(self) -> int:
        return self.T // self.n

    @property
    def window_blocks(self) -> int:
        """How many trailing blocks a query block may see (including itself)."""
        if self.window is None:
            return self.num_blocks
        return max(1, self.window // self.n)

    @property
    def num_agent_tokens(self) -> int:
        return self.P * self.T * self.L

    @property
    def seq_len(self) -> int:
        return self.P * self.T * self.L + self.T * self.K

    def with_agents(self, P: int) -> "TopologySpec":
        return replace(self, P=P)


def token_index(spec: TopologySpec, coord: TokenCoordinate) -> int:
    """Flat sequence index of a coordinate (hub coords use h as the hub slot)."""
    if coord.is_hub:
        return spec.num_agent_tokens + coord.t * spec.K + coord.h
    s = coord.h * spec.W + coord.w
    return coord.agent * spec.T * spec.L + coord.t * spec.L + s


def build_layout(spec: TopologySpec) -> list:
    """TokenCoordinate for every sequence position, in index order."""
    coords = []
    for p in range(spec.P):
        for t in range(spec.T):
            for h in range(spec.H):
                for w in range(spec.W):
                    coords.append(TokenCoordinate(agent=p, t=t, h=h, w=w, block=t // spec.n))
    for t in range(spec.T):
        for k in range(spec.K):
            coords.append(TokenCoordinate(agent=HUB, t=t, h=k, w=0, block=t // spec.n))
    return coords


def layout_arrays(spec: TopologySpec):
    """Vectorized layout: (identity, frame, block) int arrays over the sequence.

    identity is the agent slot for agent tokens and -1 for hub tokens.
    """
    S = spec.seq_len
    ident = np.empty(S, dtype=np.int64)
    frame = np.empty(S, dtype=np.int64)
    TL = spec.T * spec.L
    agent_part = np.arange(spec.num_agent_tokens)
    ident[:spec.num_agent_tokens] = agent_part // TL
    frame[:spec.num_agent_tokens] = (agent_part % TL) // spec.L
    hub_part = np.arange(spec.T * spec.K)
    ident[spec.num_agent_tokens:] = -1
    frame[spec.num_agent_tokens:] = hub_part // max(spec.K, 1)
    block = frame // spec.n
    return ident, frame, block


def hub_mask(spec: TopologySpec) -> np.ndarray:
    """Hub-and-spoke visibility: same stream, or either side is a hub token."""
    ident, _, _ = layout_arrays(spec)
    same = ident[:, None] == ident[None, :]
    is_hub = ident == -1
    return same | is_hub[:, None] | is_hub[None, :]


def block_causal_mask(spec: TopologySpec) -> np.ndarray:
    """Query block >= key block (bidirectional within a block)."""
    _, _, block = layout_arrays(spec)
    return block[None, :] <= block[:, None]


def causal_hub_mask(spec: TopologySpec) -> np.ndarray:
    """Block causality AND hub-and-spoke topology."""
    return block_causal_mask(spec) & hub_mask(spec)


def local_window_mask(spec: TopologySpec) -> np.ndarray:
    """Key block within the trailing window of the query block (block granular)."""
    if spec.window is not None and spec.window < spec.n:
        raise ValueError(f"window={spec.window} smaller than block size n={spec.n}")
    _, _, block = layout_arrays(spec)
    delta = block[:, None] - block[None, :]
    return (delta >= 0) & (delta < spec.window_blocks)


def compose_masks(*masks: np.ndarray, layout_spec: TopologySpec | None = None) -> np.ndarray:
    """Elementwise conjunction; rejects compositions that starve a query row."""
    if not masks:
        raise ValueError("compose_masks needs at least one mask")
    out = masks[0].astype(bool)
    for m in masks[1:]:
        if m.shape != out.shape:
            raise ValueError(f"mask shapes differ: {out.shape} vs {m.shape}")
        out = out & m
    rows = out.any(axis=1)
    if not rows.all():
        bad = int(np.argmax(~rows))
        where = f"query index {bad}"
        if layout_spec is not None:
            where = f"query {build_layout(layout_spec)[bad]}"
        raise ValueError(f"mask composition leaves {where} with no visible keys")
    return out
