import numpy as np
import pytest

from hubworld.attention import attention_cost
from hubworld.bench import (BenchConfig, BenchRecord, analytic_exponents,
                            analytic_rollout_pairs, bench_model_config, crossover_agents,
                            fit_scaling_exponent, forwards_per_block, long_format_table,
                            records_to_csv, run_benchmark)
from hubworld.streaming import DenoiseSchedule
from hubworld.topology import TopologySpec

FAST = BenchConfig(agents=(1, 2), reps=1, warmup=0, T=6, window=6)


class TestClosedForms:
    def test_spec_examples_per_block(self):
        cfg = BenchConfig()
        sparse = attention_cost(TopologySpec(P=8, T=cfg.T, L=4, K=2, n=3, window=24),
                                "sparse-hub")
        dense = attention_cost(TopologySpec(P=8, T=cfg.T, L=4, K=2, n=3, window=24), "dense")
        assert sparse.pairs_per_block == 2340
        assert dense.pairs_per_block == 9216

    def test_doubling_agents_doubles_p_terms(self):
        spec = TopologySpec(P=4, T=6, L=4, K=2, n=3, window=None)
        spec2 = spec.with_agents(8)
        nK = spec.n * spec.K
        p_part = attention_cost(spec, "sparse-hub").pairs_per_block - nK * nK
        p_part2 = attention_cost(spec2, "sparse-hub").pairs_per_block - nK * nK
        assert p_part2 == 2 * p_part

    def test_rollout_pairs_no_history_reduces_to_per_block(self):
        spec = TopologySpec(P=2, T=12, L=4, K=2, n=3, window=3)  # window == one block
        steps = 5
        total = analytic_rollout_pairs(spec, "sparse-hub", steps)
        per_block = attention_cost(spec, "sparse-hub").pairs_per_block
        assert total == per_block * spec.num_blocks * steps

    def test_rollout_pairs_counts_windowed_history(self):
        spec = TopologySpec(P=1, T=6, L=1, K=0, n=1, window=2)
        # blocks see min(b+1, 2) frames; 1 query x nv keys per block, 1 step
        assert analytic_rollout_pairs(spec, "dense", 1) == 1 + 2 + 2 + 2 + 2 + 2

    def test_forwards_per_block(self):
        assert forwards_per_block(DenoiseSchedule()) == 5
        assert forwards_per_block(DenoiseSchedule(timesteps=(1000,))) == 2


class TestExponentFit:
    def test_exact_quadratic(self):
        P = np.array([8, 16, 32])
        assert abs(fit_scaling_exponent(P, 7 * P ** 2) - 2.0) < 1e-9

    def test_constant_metric_is_flat(self):
        assert abs(fit_scaling_exponent([2, 4, 8], [5, 5, 5])) < 1e-12

    def test_affine_sparse_close_to_linear(self):
        exps = analytic_exponents(BenchConfig())
        assert abs(exps["dense"] - 2.0) <= 0.01
        assert 0.9 <= exps["sparse-hub"] <= 1.1

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit_scaling_exponent([4], [10])


class TestCrossover:
    def test_crossover_reported(self):
        # at n=3, L=4, K=2 sparse still exceeds dense for P <= 2 (612 vs 576)
        assert crossover_agents(BenchConfig()) == 3
        # with a big hub count the crossover moves out
        big_hub = BenchConfig(K=64)
        assert crossover_agents(big_hub) > 3


class TestRunBenchmark:
    def test_instrumented_pairs_match_analytic_exactly(self, backend):
        records = run_benchmark(BenchConfig(agents=(1, 2), reps=1, warmup=0, T=6, window=6,
                                            backends=(backend,)))
        assert records
        for r in records:
            assert not r.skipped
            assert r.measured_pairs == r.rollout_pairs
            assert r.attn_ns > 0
            assert r.rollout_ns >= r.attn_ns

    def test_fit_from_records_by_mode(self):
        records = run_benchmark(BenchConfig(agents=(1, 2, 4), reps=1, warmup=0,
                                            T=6, window=6))
        slope = fit_scaling_exponent(records, "dense", metric="pairs_per_block")
        assert abs(slope - 2.0) < 1e-9

    def test_analytic_fields_match_attention_cost(self):
        records = run_benchmark(FAST)
        model_cfg = bench_model_config(L=FAST.L, K=FAST.K, n=FAST.n, T=FAST.T,
                                       window=FAST.window, layers=FAST.layers)
        for r in records:
            spec = TopologySpec(P=r.P, T=r.T, L=r.L, K=r.K, n=r.n, window=r.window)
            cost = attention_cost(spec, r.mode, head_dim=model_cfg.head_dim,
                                  heads=model_cfg.heads)
            assert r.pairs_per_block == cost.pairs_per_block
            assert r.flops == cost.flops

    def test_oversized_dense_is_skipped_not_dropped(self):
        config = BenchConfig(agents=(2,), modes=("dense",), reps=1, warmup=0,
                             T=6, window=6, max_dense_tokens=10)
        records = run_benchmark(config)
        assert len(records) == 1
        assert records[0].skipped
        assert "budget" in records[0].note

    def test_csv_roundtrip_headers(self):
        records = run_benchmark(FAST)
        text = records_to_csv(records)
        lines = text.strip().splitlines()
        assert lines[0] == BenchRecord.CSV_HEADER
        assert len(lines) == len(records) + 1
        long = long_format_table(records)
        assert long.splitlines()[0] == "mode,backend,P,metric,value"
