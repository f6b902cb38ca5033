"""Regular-simplex agent identity geometry.

Each supported agent identity is a vertex of a regular simplex embedded in the
agent-angle space. Vertices are unit-norm, pairwise equidistant (squared
distance 2V/(V-1)) and mutually correlated at -1/(V-1), so every pair of
identities is interchangeable. Active agents occupy an injectively sampled
subset of the pool; their rotary agent-band angles are alpha * vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream


def build_isometry(V: int, rows: int | None = None) -> np.ndarray:
    """Deterministic orthonormal basis of the zero-mean subspace of R^V.

    Returns a (rows x V) matrix (rows defaults to V-1) whose first V-1 rows are
    the normalized Helmert contrasts (1,...,1,-k,0,...,0)/sqrt(k(k+1)); each
    annihilates the all-ones vector. Extra rows beyond V-1 are zero padding.
    """
    if V < 2:
        raise ValueError(f"simplex pool needs V >= 2, got V={V}")
    if rows is None:
        rows = V - 1
    if rows < V - 1:
        raise ValueError(f"isometry needs at least V-1={V - 1} rows, got {rows}")
    q = np.zeros((rows, V), dtype=np.float64)
    for k in range(1, V):
        q[k - 1, :k] = 1.0
        q[k - 1, k] = -float(k)
        q[k - 1] /= np.sqrt(k * (k + 1.0))
    return q


@dataclass(frozen=True)
class SimplexPool:
    """V simplex vertices in the d_half-dimensional agent-angle space."""

    V: int
    d_half: int
    alpha: float
    vertices: np.ndarray  # (V, d_half) float64, unit rows
    isometry: np.ndarray  # (d_half, V) float64
    embedding: str = "helmert"

    def angles(self, vertex: int) -> np.ndarray:
        return self.alpha * self.vertices[vertex]


def build_simplex_pool(V: int, d_half: int, alpha: float = 1.0,
                       embedding: str = "auto") -> SimplexPool:
    """Construct the pool: s_v = sqrt(V/(V-1)) * Q (e_v - 1/V).

    Two isometries Q are supported. "helmert" rotates the zero-mean subspace
    onto the first V-1 coordinates (fits in d_half >= V-1). "one-hot" keeps the
    centered one-hot coordinates and zero-pads (needs d_half >= V); with it all
    pairwise phase-difference vectors share one nonzero pattern up to
    permutation, so pairwise distances are identical even on the unit circle,
    not just in angle space. "auto" picks one-hot whenever it fits.
    """
    if V < 2:
        raise ValueError(f"simplex pool needs V >= 2, got V={V} (V=1 leaves 1/(V-1) undefined)")
    if V > d_half + 1:
        raise ValueError(f"V={V} does not fit in d_half={d_half} (need V <= d_half + 1)")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if embedding == "auto":
        embedding = "one-hot" if d_half >= V else "helmert"
    if embedding == "one-hot":
        if d_half < V:
            raise ValueError(f"one-hot embedding needs d_half >= V, got {d_half} < {V}")
        q = np.zeros((d_half, V), dtype=np.float64)
        q[:V, :V] = np.eye(V)
    elif embedding == "helmert":
        q = build_isometry(V, rows=d_half)
    else:
        raise ValueError(f"unknown embedding {embedding!r}")
    centered = np.eye(V, dtype=np.float64) - 1.0 / V  # column v is e_v - 1/V
    vertices = np.sqrt(V / (V - 1.0)) * (q @ centered).T  # (V, d_half)
    return SimplexPool(V=V, d_half=d_half, alpha=float(alpha), vertices=vertices,
                       isometry=q, embedding=embedding)


@dataclass(frozen=True)
class VertexAssignment:
    """Injective map from active agent slot to pool vertex (0-based)."""

    vertex_of: tuple  # agent p -> vertex index

    def __post_init__(self):
        if len(set(self.vertex_of)) != len(self.vertex_of):
            raise ValueError(f"assignment is not injective: {self.vertex_of}")

    @property
    def num_agents(self) -> int:
        return len(self.vertex_of)

    def permuted(self, perm) -> "VertexAssignment":
        """Assignment after relabelling agent slots by perm (new slot p holds old slot perm[p])."""
        return VertexAssignment(tuple(self.vertex_of[int(i)] for i in perm))


def sample_assignment(P: int, V: int, rng: RngStream) -> VertexAssignment:
    """Uniform injective assignment of P agents to V pool vertices."""
    if P > V:
        raise ValueError(f"pool exhausted: P={P} agents but only V={V} vertices; enlarge the pool")
    if P < 1:
        raise ValueError(f"need at least one agent, got P={P}")
    perm = rng.permutation(V)
    return VertexAssignment(tuple(int(v) for v in perm[:P]))


def identity_assignment(P: int) -> VertexAssignment:
    return VertexAssignment(tuple(range(P)))


def agent_angles(pool: SimplexPool, assignment: VertexAssignment) -> np.ndarray:
    """Per-agent angle vectors theta_p = alpha * s_{pi(p)}, shape (P, d_half)."""
    for v in assignment.vertex_of:
        if not 0 <= v < pool.V:
            raise ValueError(f"vertex {v} outside pool of size {pool.V}")
    idx = np.array(assignment.vertex_of, dtype=np.intp)
    return pool.alpha * pool.vertices[idx]


def complex_pair_distance(pool: SimplexPool, assignment: VertexAssignment, p: int, q: int) -> float:
    """Squared distance between two agents' unit-circle phase vectors.

    sum_r |e^{i theta_p^r} - e^{i theta_q^r}|^2 = sum_r 2 (1 - cos(theta_p^r - theta_q^r)).
    """
    if p == q:
        raise ValueError("complex_pair_distance needs two distinct agents")
    theta = agent_angles(pool, assignment)
    delta = theta[p] - theta[q]
    return float(np.sum(2.0 * (1.0 - np.cos(delta))))
