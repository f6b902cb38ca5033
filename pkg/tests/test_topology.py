import numpy as np
import pytest

from hubworld.rope import HUB
from hubworld.topology import (TopologySpec, block_causal_mask, build_layout, causal_hub_mask,
                               compose_masks, hub_mask, layout_arrays, local_window_mask,
                               token_index)


def brute_force_hub_mask(spec):
    """Direct evaluation of the hub-and-spoke indicator over all index pairs."""
    coords = build_layout(spec)
    S = len(coords)
    m = np.zeros((S, S), dtype=bool)
    for i in range(S):
        for j in range(S):
            ri, rj = coords[i].agent, coords[j].agent
            m[i, j] = (ri == rj) or (ri is HUB) or (rj is HUB)
    return m


def brute_force_causal_hub_mask(spec):
    coords = build_layout(spec)
    hub = brute_force_hub_mask(spec)
    S = len(coords)
    m = np.zeros((S, S), dtype=bool)
    for i in range(S):
        for j in range(S):
            m[i, j] = (coords[j].block <= coords[i].block) and hub[i, j]
    return m


class TestSpec:
    def test_sequence_length(self):
        spec = TopologySpec(P=3, T=4, L=2, K=2, n=2, window=None)
        assert spec.seq_len == 3 * 4 * 2 + 4 * 2

    def test_rejects_bad_blocking(self):
        with pytest.raises(ValueError):
            TopologySpec(P=1, T=5, L=1, K=0, n=2)

    def test_rejects_window_below_block(self):
        with pytest.raises(ValueError):
            TopologySpec(P=1, T=4, L=1, K=0, n=2, window=1)

    def test_spatial_split(self):
        spec = TopologySpec(P=1, T=2, L=6, K=0, n=1, H=2, W=3, window=None)
        assert (spec.H, spec.W) == (2, 3)
        with pytest.raises(ValueError):
            TopologySpec(P=1, T=2, L=6, K=0, n=1, H=2, W=2, window=None)


class TestLayout:
    def test_minimal(self):
        spec = TopologySpec(P=1, T=1, L=1, K=0, n=1, window=None)
        coords = build_layout(spec)
        assert len(coords) == 1
        assert coords[0].agent == 0 and coords[0].block == 0

    def test_ordering_and_blocks(self):
        spec = TopologySpec(P=2, T=2, L=1, K=1, n=1, window=None)
        coords = build_layout(spec)
        agents = [c.agent for c in coords]
        frames = [c.t for c in coords]
        blocks = [c.block for c in coords]
        assert agents == [0, 0, 1, 1, HUB, HUB]
        assert frames == [0, 1, 0, 1, 0, 1]
        assert blocks == [0, 1, 0, 1, 0, 1]

    def test_index_roundtrip_exhaustive(self):
        spec = TopologySpec(P=3, T=4, L=2, K=2, n=2, window=None)
        coords = build_layout(spec)
        for i, coord in enumerate(coords):
            assert token_index(spec, coord) == i

    def test_layout_arrays_match_coords(self):
        spec = TopologySpec(P=2, T=4, L=3, K=2, n=2, window=None)
        ident, frame, block = layout_arrays(spec)
        coords = build_layout(spec)
        for i, c in enumerate(coords):
            assert ident[i] == (-1 if c.is_hub else c.agent)
            assert frame[i] == c.t
            assert block[i] == c.block


class TestHubMask:
    def test_three_token_example(self):
        spec = TopologySpec(P=2, T=1, L=1, K=1, n=1, window=None)
        m = hub_mask(spec)
        assert np.array_equal(m.astype(int), [[1, 0, 1], [0, 1, 1], [1, 1, 1]])

    def test_no_hub_isolates_agents(self):
        spec = TopologySpec(P=3, T=2, L=2, K=0, n=1, window=None)
        m = hub_mask(spec)
        ident, _, _ = layout_arrays(spec)
        assert np.array_equal(m, ident[:, None] == ident[None, :])

    def test_matches_brute_force(self):
        spec = TopologySpec(P=4, T=2, L=2, K=1, n=1, window=None)
        assert np.array_equal(hub_mask(spec), brute_force_hub_mask(spec))

    def test_sparsity_count_closed_form(self):
        for spec in [TopologySpec(P=2, T=2, L=3, K=1, n=1, window=None),
                     TopologySpec(P=4, T=4, L=2, K=2, n=2, window=None),
                     TopologySpec(P=3, T=6, L=1, K=0, n=3, window=None)]:
            TL, TK = spec.T * spec.L, spec.T * spec.K
            expected = spec.P * TL ** 2 + 2 * spec.P * TL * TK + TK ** 2
            assert int(hub_mask(spec).sum()) == expected

    def test_two_hop_reachability_within_block(self):
        spec = TopologySpec(P=3, T=2, L=2, K=1, n=2, window=None)
        m = hub_mask(spec)
        two_hop = m | (m @ m)
        ident, _, block = layout_arrays(spec)
        for i in range(spec.seq_len):
            for j in range(spec.seq_len):
                if ident[i] >= 0 and ident[j] >= 0 and block[i] == block[j]:
                    assert two_hop[i, j]


class TestCausalHubMask:
    def test_single_block_equals_hub_mask(self):
        spec = TopologySpec(P=2, T=3, L=2, K=1, n=3, window=None)
        assert np.array_equal(causal_hub_mask(spec), hub_mask(spec))

    def test_brute_force_small(self):
        spec = TopologySpec(P=2, T=2, L=1, K=1, n=1, window=None)
        m = causal_hub_mask(spec)
        assert np.array_equal(m, brute_force_causal_hub_mask(spec))
        # a1f0 (row 0) must not see a1f1 (col 1) or hubf1 (col 5)
        assert not m[0, 1] and not m[0, 5]
        # hubf1 (row 5) sees every token
        assert m[5].all()

    def test_never_sees_future_blocks(self):
        spec = TopologySpec(P=3, T=6, L=2, K=2, n=2, window=None)
        m = causal_hub_mask(spec)
        _, _, block = layout_arrays(spec)
        future = block[None, :] > block[:, None]
        assert not (m & future).any()

    def test_brute_force_multiblock(self):
        spec = TopologySpec(P=2, T=4, L=2, K=2, n=2, window=None)
        assert np.array_equal(causal_hub_mask(spec), brute_force_causal_hub_mask(spec))


class TestLocalWindowMask:
    def test_unbounded_window_is_block_causal(self):
        spec = TopologySpec(P=2, T=4, L=1, K=1, n=1, window=17)
        assert np.array_equal(local_window_mask(spec), block_causal_mask(spec))

    def test_window_two_frames(self):
        spec = TopologySpec(P=1, T=4, L=1, K=0, n=1, window=2)
        m = local_window_mask(spec)
        _, frame, _ = layout_arrays(spec)
        row3 = m[np.argmax(frame == 3)]
        assert set(np.flatnonzero(row3)) == {2, 3}

    def test_window_equals_block(self):
        spec = TopologySpec(P=1, T=6, L=1, K=0, n=2, window=2)
        m = local_window_mask(spec)
        _, _, block = layout_arrays(spec)
        assert np.array_equal(m, block[:, None] == block[None, :])


class TestCompose:
    def test_identity(self):
        spec = TopologySpec(P=2, T=2, L=1, K=1, n=1, window=None)
        m = hub_mask(spec)
        assert np.array_equal(compose_masks(m), m)

    def test_all_true_neutral(self):
        spec = TopologySpec(P=2, T=2, L=1, K=1, n=1, window=None)
        m = causal_hub_mask(spec)
        assert np.array_equal(compose_masks(m, np.ones_like(m)), m)

    def test_triple_composition_matches_brute_force(self):
        spec = TopologySpec(P=2, T=4, L=1, K=1, n=1, window=2)
        got = compose_masks(hub_mask(spec), block_causal_mask(spec), local_window_mask(spec))
        coords = build_layout(spec)
        S = len(coords)
        expected = np.zeros((S, S), dtype=bool)
        wb = spec.window_blocks
        for i in range(S):
            for j in range(S):
                ci, cj = coords[i], coords[j]
                hub_ok = (ci.agent == cj.agent) or ci.is_hub or cj.is_hub
                causal = cj.block <= ci.block
                windowed = 0 <= ci.block - cj.block < wb
                expected[i, j] = hub_ok and causal and windowed
        assert np.array_equal(got, expected)

    def test_empty_row_rejected_with_coordinate(self):
        spec = TopologySpec(P=2, T=2, L=1, K=1, n=1, window=None)
        m = hub_mask(spec)
        with pytest.raises(ValueError, match="query"):
            compose_masks(m, np.zeros_like(m), layout_spec=spec)

    def test_diagonal_always_true(self):
        spec = TopologySpec(P=2, T=4, L=2, K=1, n=2, window=2)
        m = compose_masks(causal_hub_mask(spec), local_window_mask(spec))
        assert m.diagonal().all()


class TestPermutationEquivariance:
    def test_agent_permutation_permutes_mask_blocks(self):
        spec = TopologySpec(P=3, T=2, L=2, K=1, n=1, window=None)
        m = causal_hub_mask(spec)
        # permuting agent indices permutes the corresponding row/column blocks
        perm = [2, 0, 1]
        TL = spec.T * spec.L
        idx = np.arange(spec.seq_len)
        for p, q in enumerate(perm):
            idx[p * TL:(p + 1) * TL] = np.arange(q * TL, (q + 1) * TL)
        permuted = m[np.ix_(idx, idx)]
        assert np.array_equal(permuted, m)
