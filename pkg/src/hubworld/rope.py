"""Factorized rotary embedding over (time, agent, height, width) bands.

The head dimension is split into four even bands. Time/height/width bands use
the standard geometric frequency schedule; the agent band carries the simplex
vertex angles directly (scaled by alpha, zero-padded past the simplex
support) — no per-dimension frequencies, otherwise the equidistance of the
vertex geometry would be destroyed. Hub tokens rotate only in the time band.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simplex import SimplexPool, VertexAssignment, agent_angles

HUB = None  # identity marker for hub tokens in TokenCoordinate.agent


@dataclass(frozen=True)
class TokenCoordinate:
    """Position of one token: agent slot (None for hub), frame, spatial indices, block."""

    agent: int | None
    t: int
    h: int = 0
    w: int = 0
    block: int = 0

    @property
    def is_hub(self) -> bool:
        return self.agent is HUB


def standard_freqs(d_band: int, base: float) -> np.ndarray:
    """Geometric RoPE schedule for one band: base^(-2j/d_band), j = 0..d_band/2-1."""
    if d_band == 0:
        return np.zeros(0, dtype=np.float64)
    j = np.arange(d_band // 2, dtype=np.float64)
    return base ** (-2.0 * j / d_band)


@dataclass(frozen=True, eq=False)
class RopeLayout:
    """Band partition (d_t, d_p, d_h, d_w) of the rotary head dimension."""

    d_t: int
    d_p: int
    d_h: int
    d_w: int
    base: float = 10000.0
    # explicit per-band frequency lists; temporal may be a truncation of a
    # larger schedule after band reallocation
    t_freqs: np.ndarray = field(default=None, repr=False)
    h_freqs: np.ndarray = field(default=None, repr=False)
    w_freqs: np.ndarray = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, RopeLayout):
            return NotImplemented
        return ((self.d_t, self.d_p, self.d_h, self.d_w, self.base)
                == (other.d_t, other.d_p, other.d_h, other.d_w, other.base)
                and np.array_equal(self.t_freqs, other.t_freqs)
                and np.array_equal(self.h_freqs, other.h_freqs)
                and np.array_equal(self.w_freqs, other.w_freqs))

    def __hash__(self):
        return hash((self.d_t, self.d_p, self.d_h, self.d_w, self.base,
                     self.t_freqs.tobytes(), self.h_freqs.tobytes(), self.w_freqs.tobytes()))

    def __post_init__(self):
        for name, d in (("d_t", self.d_t), ("d_p", self.d_p), ("d_h", self.d_h), ("d_w", self.d_w)):
            if d < 0 or d % 2 != 0:
                raise ValueError(f"{name}={d} must be even and non-negative")
        if self.t_freqs is None:
            object.__setattr__(self, "t_freqs", standard_freqs(self.d_t, self.base))
        if self.h_freqs is None:
            object.__setattr__(self, "h_freqs", standard_freqs(self.d_h, self.base))
        if self.w_freqs is None:
            object.__setattr__(self, "w_freqs", standard_freqs(self.d_w, self.base))
        for name, freqs, d in (("t", self.t_freqs, self.d_t), ("h", self.h_freqs, self.d_h),
                               ("w", self.w_freqs, self.d_w)):
            if len(freqs) != d // 2:
                raise ValueError(f"{name} band has {len(freqs)} freqs for size {d}")

    @property
    def d_head(self) -> int:
        return self.d_t + self.d_p + self.d_h + self.d_w

    @property
    def num_pairs(self) -> int:
        return self.d_head // 2


def reallocate_temporal_band(layout_3d: RopeLayout, d_p: int) -> RopeLayout:
    """Hand the d_p lowest-frequency temporal dimensions to the agent band.

    The surviving temporal dimensions keep their original (highest) frequencies;
    spatial bands are untouched. This is how an agent band is carved out of a
    pretrained 3D layout without moving any existing phase.
    """
    if layout_3d.d_p != 0:
        raise ValueError(f"layout already has an agent band of size {layout_3d.d_p}")
    if d_p % 2 != 0 or d_p < 0:
        raise ValueError(f"d_p={d_p} must be even and non-negative")
    if d_p == 0:
        return layout_3d
    if d_p >= layout_3d.d_t:
        raise ValueError(f"cannot move d_p={d_p} dims out of a temporal band of {layout_3d.d_t}")
    keep = (layout_3d.d_t - d_p) // 2
    return RopeLayout(
        d_t=layout_3d.d_t - d_p,
        d_p=d_p,
        d_h=layout_3d.d_h,
        d_w=layout_3d.d_w,
        base=layout_3d.base,
        t_freqs=layout_3d.t_freqs[:keep].copy(),
        h_freqs=layout_3d.h_freqs.copy(),
        w_freqs=layout_3d.w_freqs.copy(),
    )


def rope_angles(layout: RopeLayout, pool: SimplexPool, assignment: VertexAssignment,
                coord: TokenCoordinate, bounds: tuple | None = None) -> np.ndarray:
    """Rotation angles (length d_head/2) for one token coordinate.

    Agent tokens: t*w_t | alpha*s_pi(p) (zero-padded) | h*w_h | w*w_w.
    Hub tokens: the same temporal phase as an agent token of that frame, and
    zeros (identity rotation) on the agent/height/width bands.
    """
    if bounds is not None:
        P, T, H, W = bounds
        if not 0 <= coord.t < T:
            raise ValueError(f"frame {coord.t} outside 0..{T - 1}")
        if not coord.is_hub:
            if not 0 <= coord.agent < P:
                raise ValueError(f"agent {coord.agent} outside 0..{P - 1}")
            if not (0 <= coord.h < H and 0 <= coord.w < W):
                raise ValueError(f"spatial ({coord.h},{coord.w}) outside {H}x{W}")
    elif coord.t < 0 or coord.h < 0 or coord.w < 0:
        raise ValueError(f"negative coordinate {coord}")

    angles = np.zeros(layout.num_pairs, dtype=np.float64)
    n_t = layout.d_t // 2
    n_p = layout.d_p // 2
    n_h = layout.d_h // 2
    angles[:n_t] = coord.t * layout.t_freqs
    if not coord.is_hub:
        if n_p:
            if pool.d_half > n_p:
                raise ValueError(f"pool d_half={pool.d_half} exceeds agent band slots {n_p}")
            angles[n_t:n_t + pool.d_half] = agent_angles(pool, assignment)[coord.agent]
        angles[n_t + n_p:n_t + n_p + n_h] = coord.h * layout.h_freqs
        angles[n_t + n_p + n_h:] = coord.w * layout.w_freqs
    return angles


def angle_table(layout: RopeLayout, pool: SimplexPool, assignment: VertexAssignment,
                coords: list) -> np.ndarray:
    """Stacked rope_angles for a token list, shape (len(coords), d_head/2)."""
    out = np.empty((len(coords), layout.num_pairs), dtype=np.float64)
    for i, coord in enumerate(coords):
        out[i] = rope_angles(layout, pool, assignment, coord)
    return out


def apply_rotary(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate consecutive feature pairs (x_2r, x_2r+1) by angles_r.

    x: (..., d_head); angles: broadcastable to (..., d_head/2). Norm-preserving.
    """
    x = np.asarray(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"trailing extent {d} must be even")
    angles = np.asarray(angles, dtype=x.dtype)
    if angles.shape[-1] != d // 2:
        raise ValueError(f"angles last axis {angles.shape[-1]} != d_head/2 = {d // 2}")
    cos = np.cos(angles)
    sin = np.sin(angles)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
