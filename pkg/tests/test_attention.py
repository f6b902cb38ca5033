import numpy as np
import pytest

from hubworld.attention import (AttentionWeights, attention_cost, build_plan,
                                init_attention_weights, instrumented,
                                masked_attention_reference, multi_head_attention, run_plan,
                                sparse_hub_attention)
from hubworld.numerics import MaskedRowError, RngStream
from hubworld.rope import RopeLayout, angle_table
from hubworld.simplex import build_simplex_pool, identity_assignment
from hubworld.topology import (TopologySpec, build_layout, causal_hub_mask, compose_masks,
                               local_window_mask)


def per_query_loop_attention(q, k, v, mask, scale):
    """Scalar per-query oracle: explicit loops, no batching tricks."""
    S, d = q.shape
    out = np.zeros_like(q)
    for i in range(S):
        keys = np.flatnonzero(mask[i])
        logits = np.array([float(q[i] @ k[j]) * scale for j in keys])
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        for wj, j in zip(w, keys):
            out[i] += wj * v[j]
    return out


def rand_qkv(rng, heads, S, d, dtype=np.float32):
    return (rng.split("q").normal((heads, S, d), dtype=dtype),
            rng.split("k").normal((heads, S, d), dtype=dtype),
            rng.split("v").normal((heads, S, d), dtype=dtype))


class TestReference:
    def test_single_token_passthrough(self):
        v = np.array([[2.0, -1.0]])
        out = masked_attention_reference(v, v, v, np.ones((1, 1), dtype=bool))
        assert np.allclose(out, v)

    def test_identity_mask_returns_values(self):
        rng = RngStream(0)
        x = rng.normal((6, 4), dtype=np.float64)
        out = masked_attention_reference(x, x, x, np.eye(6, dtype=bool))
        assert np.abs(out - x).max() < 1e-12

    def test_matches_per_query_loop(self):
        rng = RngStream(8)
        spec = TopologySpec(P=2, T=2, L=2, K=1, n=1, window=None)
        S = spec.seq_len
        q, k, v = rand_qkv(rng, 1, S, 8)
        mask = causal_hub_mask(spec)
        ref = masked_attention_reference(q[0], k[0], v[0], mask)
        oracle = per_query_loop_attention(q[0], k[0], v[0], mask, 1.0 / np.sqrt(8))
        assert np.abs(ref - oracle).max() < 1e-5

    def test_propagates_empty_row(self):
        q = np.zeros((2, 4))
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        with pytest.raises(MaskedRowError):
            masked_attention_reference(q, q, q, mask)


class TestSparseHub:
    def test_no_hub_equals_independent_streams(self, backend):
        rng = RngStream(10)
        spec = TopologySpec(P=3, T=2, L=2, K=0, n=1, window=None)
        S = spec.seq_len
        q, k, v = rand_qkv(rng, 2, S, 8)
        out = sparse_hub_attention(q, k, v, spec)
        TL = spec.T * spec.L
        single = TopologySpec(P=1, T=2, L=2, K=0, n=1, window=None)
        for p in range(3):
            sl = slice(p * TL, (p + 1) * TL)
            solo = sparse_hub_attention(q[:, sl], k[:, sl], v[:, sl], single)
            assert np.abs(out[:, sl] - solo).max() < 1e-6

    def test_single_agent_equals_dense(self, backend):
        rng = RngStream(11)
        spec = TopologySpec(P=1, T=2, L=3, K=2, n=1, window=None)
        q, k, v = rand_qkv(rng, 2, spec.seq_len, 8)
        out = sparse_hub_attention(q, k, v, spec)
        ref = masked_attention_reference(q, k, v, causal_hub_mask(spec))
        assert np.abs(out - ref).max() < 1e-5

    def test_seeded_instance_matches_dense_oracle(self, backend):
        rng = RngStream(12)
        spec = TopologySpec(P=4, T=2, L=4, K=2, n=1, window=None)
        q, k, v = rand_qkv(rng, 2, spec.seq_len, 16)
        out = sparse_hub_attention(q, k, v, spec)
        ref = masked_attention_reference(q, k, v, causal_hub_mask(spec))
        assert np.abs(out - ref).max() < 1e-5

    def test_windowed_matches_composed_oracle(self, backend):
        rng = RngStream(13)
        spec = TopologySpec(P=2, T=6, L=2, K=1, n=1, window=2)
        q, k, v = rand_qkv(rng, 1, spec.seq_len, 8)
        out = sparse_hub_attention(q, k, v, spec)
        mask = compose_masks(causal_hub_mask(spec), local_window_mask(spec))
        ref = masked_attention_reference(q, k, v, mask)
        assert np.abs(out - ref).max() < 1e-5

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
    def test_oracle_equivalence_sweep(self, backend, dtype, tol):
        root = RngStream(999)
        count = 0
        for trial in range(50):
            r = root.split(f"sweep{trial}")
            P = int(r.split("P").integers(1, 5))
            n = int(r.split("n").integers(1, 3))
            blocks = int(r.split("blocks").integers(1, 3))
            T = n * blocks
            L = int(r.split("L").integers(1, 7))
            K = int(r.split("K").integers(0, 4))
            spec = TopologySpec(P=P, T=T, L=L, K=K, n=n, window=None)
            q, k, v = rand_qkv(r, 2, spec.seq_len, 8, dtype=dtype)
            out = sparse_hub_attention(q, k, v, spec)
            ref = masked_attention_reference(q, k, v, causal_hub_mask(spec))
            assert np.abs(out - ref).max() < tol, f"spec {spec}"
            count += 1
        assert count == 50

    def test_rejects_wrong_sequence_length(self):
        spec = TopologySpec(P=2, T=2, L=2, K=1, n=1, window=None)
        q = np.zeros((1, 3, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="layout"):
            sparse_hub_attention(q, q, q, spec)

    def test_instrumentation_counts_plan_pairs(self, backend):
        rng = RngStream(14)
        spec = TopologySpec(P=2, T=4, L=2, K=1, n=2, window=None)
        q, k, v = rand_qkv(rng, 1, spec.seq_len, 8)
        seen = []
        with instrumented(lambda mode, pairs, ns: seen.append((mode, pairs, ns))):
            sparse_hub_attention(q, k, v, spec)
        plan = build_plan(spec, "causal-hub")
        assert seen[0][0] == "causal-hub"
        assert seen[0][1] == plan.pair_count
        assert seen[0][2] > 0


class TestPlans:
    def test_queries_partition_sequence(self):
        spec = TopologySpec(P=3, T=4, L=2, K=2, n=2, window=None)
        plan = build_plan(spec, "causal-hub")
        assert sorted(plan.q_idx.tolist()) == list(range(spec.seq_len))

    def test_agent_groups_never_gather_other_agents(self):
        spec = TopologySpec(P=3, T=4, L=2, K=2, n=2, window=None)
        plan = build_plan(spec, "causal-hub")
        TL = spec.T * spec.L
        for g in range(plan.num_groups):
            qi, ki = plan.group(g)
            owners = set(qi // TL)
            if owners <= set(range(spec.P)) and len(owners) == 1:
                p = owners.pop()
                for j in ki:
                    assert (j >= spec.num_agent_tokens) or (j // TL == p)

    def test_window_limits_key_blocks(self):
        spec = TopologySpec(P=1, T=8, L=1, K=1, n=2, window=4)
        plan = build_plan(spec, "causal-hub")
        from hubworld.topology import layout_arrays

        _, _, block = layout_arrays(spec)
        for g in range(plan.num_groups):
            qi, ki = plan.group(g)
            qb = block[qi].max()
            assert ((block[ki] <= qb) & (block[ki] > qb - spec.window_blocks)).all()

    def test_dense_causal_plan_matches_masked_reference(self, backend):
        rng = RngStream(15)
        spec = TopologySpec(P=3, T=4, L=2, K=0, n=2, window=None)
        S = spec.num_agent_tokens
        q, k, v = rand_qkv(rng, 2, S, 8)
        plan = build_plan(spec, "dense-causal")
        out = run_plan(q, k, v, plan)
        from hubworld.topology import block_causal_mask

        mask = block_causal_mask(spec)[:S, :S]
        ref = masked_attention_reference(q, k, v, mask)
        assert np.abs(out - ref).max() < 1e-5

    def test_bidirectional_plan_is_full_attention(self, backend):
        rng = RngStream(16)
        spec = TopologySpec(P=2, T=2, L=2, K=0, n=1, window=None)
        S = spec.num_agent_tokens
        q, k, v = rand_qkv(rng, 1, S, 8)
        plan = build_plan(spec, "bidirectional-dense")
        out = run_plan(q, k, v, plan)
        ref = masked_attention_reference(q, k, v, np.ones((S, S), dtype=bool))
        assert np.abs(out - ref).max() < 1e-5


class TestMultiHead:
    LAYOUT = RopeLayout(d_t=4, d_p=6, d_h=2, d_w=2)

    def _setup(self, seed, spec, heads=2):
        rng = RngStream(seed)
        D = heads * self.LAYOUT.d_head
        weights = init_attention_weights(rng.split("w"), D, heads)
        pool = build_simplex_pool(4, d_half=3, alpha=1.0)
        assign = identity_assignment(spec.P)
        angles = angle_table(self.LAYOUT, pool, assign, build_layout(spec))
        x = rng.split("x").normal((spec.seq_len, D))
        return x, weights, angles

    def test_zero_weights_zero_output(self):
        spec = TopologySpec(P=2, T=2, L=2, K=1, n=1, window=None)
        x, weights, angles = self._setup(20, spec)
        zeroed = AttentionWeights(
            wq=weights.wq, wk=weights.wk, wv=np.zeros_like(weights.wv),
            wo=np.zeros_like(weights.wo), bq=weights.bq, bk=weights.bk,
            bv=weights.bv * 0, bo=weights.bo * 0, heads=weights.heads,
            head_dim=weights.head_dim)
        out = multi_head_attention(x, zeroed, spec, angles)
        assert np.abs(out).max() == 0.0

    def test_symmetric_agents_equal_outputs(self):
        # alpha ~ 0, no hubs, identical per-agent inputs -> identical outputs
        spec = TopologySpec(P=2, T=2, L=2, K=0, n=1, window=None)
        rng = RngStream(21)
        heads = 1
        D = heads * self.LAYOUT.d_head
        weights = init_attention_weights(rng.split("w"), D, heads)
        pool = build_simplex_pool(4, d_half=3, alpha=1e-12)
        assign = identity_assignment(spec.P)
        angles = angle_table(self.LAYOUT, pool, assign, build_layout(spec))
        TL = spec.T * spec.L
        stream = rng.split("x").normal((TL, D))
        x = np.concatenate([stream, stream], axis=0)
        out = multi_head_attention(x, weights, spec, angles)
        assert np.array_equal(out[:TL], out[TL:])

    def test_end_to_end_matches_dense_pathway(self, backend):
        spec = TopologySpec(P=2, T=2, L=2, K=2, n=1, window=None)
        x, weights, angles = self._setup(22, spec)
        out = multi_head_attention(x, weights, spec, angles, mode="causal-hub")

        from hubworld.attention import merge_heads, split_heads
        from hubworld.rope import apply_rotary

        q = split_heads(x @ weights.wq + weights.bq, weights.heads)
        k = split_heads(x @ weights.wk + weights.bk, weights.heads)
        v = split_heads(x @ weights.wv + weights.bv, weights.heads)
        ang = angles[None].astype(x.dtype)
        q = apply_rotary(q, ang)
        k = apply_rotary(k, ang)
        ref = masked_attention_reference(q, k, v, causal_hub_mask(spec))
        expected = merge_heads(ref) @ weights.wo + weights.bo
        assert np.abs(out - expected).max() < 1e-5


class TestCost:
    def test_spec_examples(self):
        small = TopologySpec(P=2, T=3, L=4, K=2, n=3, window=None)
        big = TopologySpec(P=8, T=3, L=4, K=2, n=3, window=None)
        assert attention_cost(small, "dense").pairs_per_block == 576
        assert attention_cost(small, "sparse-hub").pairs_per_block == 612
        assert attention_cost(big, "dense").pairs_per_block == 9216
        assert attention_cost(big, "sparse-hub").pairs_per_block == 2340

    def test_no_hub_reduces_to_independent_streams(self):
        spec = TopologySpec(P=5, T=2, L=3, K=0, n=2, window=None)
        nL = spec.n * spec.L
        assert attention_cost(spec, "sparse-hub").pairs_per_block == spec.P * nL ** 2

    def test_sparse_pairs_affine_in_P(self):
        base = dict(T=3, L=4, K=2, n=3, window=None)
        pairs = [attention_cost(TopologySpec(P=p, **base), "sparse-hub").pairs_per_block
                 for p in range(1, 9)]
        second_diff = np.diff(np.diff(pairs))
        assert np.array_equal(second_diff, np.zeros(6))

    def test_flops_formula(self):
        spec = TopologySpec(P=2, T=6, L=4, K=2, n=3, window=None)
        rep = attention_cost(spec, "dense", head_dim=16, heads=2)
        assert rep.flops == rep.pairs_per_block * 4 * 16 * 2 * spec.num_blocks

    def test_csv_row(self):
        spec = TopologySpec(P=2, T=3, L=4, K=2, n=3, window=None)
        rep = attention_cost(spec, "sparse-hub")
        assert rep.csv_row() == f"sparse-hub,2,3,4,2,3,612,{rep.flops}"


class TestJointPermutationEquivariance:
    def test_sparse_attention_exact_under_vertex_ordered_gather(self, backend):
        rng = RngStream(30)
        spec = TopologySpec(P=3, T=2, L=2, K=2, n=1, window=None)
        TL = spec.T * spec.L
        q, k, v = rand_qkv(rng, 2, spec.seq_len, 8)
        assign = (2, 0, 1)  # agent slot -> vertex
        vertex_order = tuple(np.argsort(assign))
        out = sparse_hub_attention(q, k, v, spec, agent_order=vertex_order)

        perm = (1, 2, 0)  # new slot p holds old slot perm[p]
        def permute(x):
            y = x.copy()
            for new_p, old_p in enumerate(perm):
                y[:, new_p * TL:(new_p + 1) * TL] = x[:, old_p * TL:(old_p + 1) * TL]
            return y

        assign_p = tuple(assign[old_p] for old_p in perm)
        vertex_order_p = tuple(np.argsort(assign_p))
        out_p = sparse_hub_attention(permute(q), permute(k), permute(v), spec,
                                     agent_order=vertex_order_p)
        assert np.array_equal(out_p[:, :spec.num_agent_tokens],
                              permute(out)[:, :spec.num_agent_tokens])
        assert np.array_equal(out_p[:, spec.num_agent_tokens:],
                              out[:, spec.num_agent_tokens:])
