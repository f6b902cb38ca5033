import numpy as np
import pytest

from hubworld.numerics import RngStream
from hubworld.rope import (HUB, RopeLayout, TokenCoordinate, apply_rotary,
                           reallocate_temporal_band, rope_angles, standard_freqs)
from hubworld.simplex import build_simplex_pool, identity_assignment

LAYOUT = RopeLayout(d_t=4, d_p=6, d_h=2, d_w=2)
POOL = build_simplex_pool(4, d_half=3, alpha=1.0)
ASSIGN = identity_assignment(4)


class TestLayout:
    def test_band_sizes_must_be_even(self):
        with pytest.raises(ValueError):
            RopeLayout(d_t=3, d_p=2, d_h=2, d_w=2)

    def test_standard_schedule(self):
        f = standard_freqs(8, 10000.0)
        assert np.allclose(f, [1.0, 10000 ** -0.25, 10000 ** -0.5, 10000 ** -0.75])

    def test_d_head(self):
        assert LAYOUT.d_head == 14
        assert LAYOUT.num_pairs == 7


class TestRopeAngles:
    def test_origin_is_identity(self):
        pool = build_simplex_pool(4, d_half=3, alpha=1e-12)
        ang = rope_angles(LAYOUT, pool, ASSIGN, TokenCoordinate(agent=0, t=0, h=0, w=0))
        assert np.abs(ang).max() < 1e-12

    def test_hub_shares_temporal_band_only(self):
        hub = rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=HUB, t=3))
        agent = rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=1, t=3, h=2, w=2))
        n_t = LAYOUT.d_t // 2
        assert np.array_equal(hub[:n_t], agent[:n_t])
        assert np.array_equal(hub[n_t:], np.zeros(LAYOUT.num_pairs - n_t))

    def test_agents_differ_only_in_agent_band(self):
        a = rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=0, t=2, h=1, w=1))
        b = rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=2, t=2, h=1, w=1))
        diff = a - b
        n_t, n_p = LAYOUT.d_t // 2, LAYOUT.d_p // 2
        assert np.abs(diff[:n_t]).max() == 0
        assert np.abs(diff[n_t + n_p:]).max() == 0
        assert abs(np.sum(diff ** 2) - 8.0 / 3.0) < 1e-12

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=0, t=5), bounds=(4, 4, 2, 2))
        with pytest.raises(ValueError):
            rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=9, t=0), bounds=(4, 4, 2, 2))


class TestApplyRotary:
    def test_zero_angles_identity(self):
        rng = RngStream(1)
        x = rng.normal((5, 8), dtype=np.float64)
        assert np.array_equal(apply_rotary(x, np.zeros((5, 4))), x)

    def test_half_turn(self):
        x = np.array([1.0, 0.0, 1.0, 0.0])
        angles = np.array([np.pi, 0.0])
        out = apply_rotary(x, angles)
        assert np.abs(out - np.array([-1.0, 0.0, 1.0, 0.0])).max() < 1e-6

    def test_norm_preserved(self):
        rng = RngStream(2)
        x = rng.normal((20, 16), dtype=np.float32)
        angles = rng.split("ang").normal((20, 8), dtype=np.float32) * 3
        out = apply_rotary(x, angles)
        assert np.abs(np.linalg.norm(out, axis=-1) - np.linalg.norm(x, axis=-1)).max() < 1e-5

    def test_relative_phase(self):
        # <R(t1) q, R(t2) k> == <R(t1 - t2) q, k>
        rng = RngStream(3)
        for trial in range(100):
            r = rng.split(f"t{trial}")
            q = r.split("q").normal((16,), dtype=np.float64)
            k = r.split("k").normal((16,), dtype=np.float64)
            t1 = r.split("a1").normal((8,), dtype=np.float64) * 2
            t2 = r.split("a2").normal((8,), dtype=np.float64) * 2
            lhs = apply_rotary(q, t1) @ apply_rotary(k, t2)
            rhs = apply_rotary(q, t1 - t2) @ k
            assert abs(lhs - rhs) < 1e-5

    def test_hub_rotation_is_identity_off_temporal(self):
        rng = RngStream(4)
        x = rng.normal((LAYOUT.d_head,), dtype=np.float64)
        ang = rope_angles(LAYOUT, POOL, ASSIGN, TokenCoordinate(agent=HUB, t=2))
        out = apply_rotary(x, ang)
        assert np.array_equal(out[LAYOUT.d_t:], x[LAYOUT.d_t:])


class TestReallocation:
    def test_production_partition(self):
        layout3d = RopeLayout(d_t=96, d_p=0, d_h=16, d_w=16)
        out = reallocate_temporal_band(layout3d, 32)
        assert (out.d_t, out.d_p, out.d_h, out.d_w) == (64, 32, 16, 16)

    def test_noop(self):
        layout3d = RopeLayout(d_t=96, d_p=0, d_h=16, d_w=16)
        assert reallocate_temporal_band(layout3d, 0) is layout3d

    def test_surviving_freqs_are_top_of_original(self):
        layout3d = RopeLayout(d_t=24, d_p=0, d_h=4, d_w=4)
        out = reallocate_temporal_band(layout3d, 8)
        assert np.array_equal(out.t_freqs, layout3d.t_freqs[: (24 - 8) // 2])
        assert np.array_equal(out.h_freqs, layout3d.h_freqs)
        # moved dimensions were the lowest-frequency tail
        assert layout3d.t_freqs[(24 - 8) // 2:].max() < out.t_freqs.min()

    def test_rejects_oversized_agent_band(self):
        layout3d = RopeLayout(d_t=8, d_p=0, d_h=4, d_w=4)
        with pytest.raises(ValueError):
            reallocate_temporal_band(layout3d, 8)
