"""Attention operators against dense numpy oracles, plus the fusion stack."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvkit import tensor as T
from pvkit.fusion import (
    FusionStack,
    Neighborhood,
    full_neighborhood,
    point_attention,
    point_voxel_attention,
    radius_neighborhood,
    segment_softmax,
    standard_attention,
)


def dense_standard(q, k, v, scale=True):
    logits = q @ k.T
    if scale:
        logits = logits / np.sqrt(q.shape[1])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    return w @ v


def dense_point(q, k, v):
    # per-channel softmax over keys of (Q_i + K_j), value (V_j + Q_i)
    nq, d = q.shape
    out = np.zeros((nq, d))
    for i in range(nq):
        logits = q[i] + k  # (nk, d)
        e = np.exp(logits - logits.max(axis=0))
        w = e / e.sum(axis=0)
        out[i] = (w * (v + q[i])).sum(axis=0)
    return out


def dense_gated(q, k, v, gq, gv, scale=True):
    nq, d = q.shape
    out = np.zeros((nq, d))
    for i in range(nq):
        logits = (q[i] * k).sum(axis=1)
        if scale:
            logits = logits / np.sqrt(d)
        logits = logits * gq[i]
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        out[i] = (w[:, None] * (v + gv[:, None] * q[i])).sum(axis=0)
    return out


class TestStandardAttention:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            nq, nk, d = rng.integers(1, 8), rng.integers(1, 8), int(rng.integers(2, 6))
            q, k = rng.normal(size=(nq, d)), rng.normal(size=(nk, d))
            v = rng.normal(size=(nk, d + 1))
            got = standard_attention(
                T.constant(q), T.constant(k), T.constant(v), full_neighborhood(nq, nk)
            ).data
            np.testing.assert_allclose(got, dense_standard(q, k, v), atol=1e-12)

    def test_unscaled_variant(self):
        rng = np.random.default_rng(1)
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        got = standard_attention(
            T.constant(q), T.constant(k), T.constant(v),
            full_neighborhood(3, 5), scale=False,
        ).data
        np.testing.assert_allclose(got, dense_standard(q, k, v, scale=False), atol=1e-12)

    def test_restricted_neighborhood(self):
        # query 0 sees only key 1; its output must be exactly value 1
        rng = np.random.default_rng(2)
        q, k, v = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        nbhd = Neighborhood(
            np.array([0, 1, 1]), np.array([1, 0, 2]), num_queries=2, num_keys=4
        )
        got = standard_attention(T.constant(q), T.constant(k), T.constant(v), nbhd).data
        np.testing.assert_allclose(got[0], v[1], atol=1e-12)

    def test_query_without_keys_gives_zero(self):
        rng = np.random.default_rng(3)
        q, k, v = rng.normal(size=(3, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        nbhd = Neighborhood(np.array([0, 2]), np.array([0, 1]), 3, 2)
        got = standard_attention(T.constant(q), T.constant(k), T.constant(v), nbhd).data
        np.testing.assert_array_equal(got[1], np.zeros(2))

    def test_dim_mismatch_raises(self):
        q = T.constant(np.ones((2, 3)))
        k = T.constant(np.ones((2, 4)))
        v = T.constant(np.ones((2, 4)))
        with pytest.raises(ValueError):
            standard_attention(q, k, v, full_neighborhood(2, 2))


class TestPointAttention:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            nq, nk, d = int(rng.integers(1, 7)), int(rng.integers(1, 7)), 4
            q, k, v = (rng.normal(size=(n, d)) for n in (nq, nk, nk))
            got = point_attention(
                T.constant(q), T.constant(k), T.constant(v), full_neighborhood(nq, nk)
            ).data
            np.testing.assert_allclose(got, dense_point(q, k, v), atol=1e-12)

    def test_single_key_passes_value_plus_query(self):
        q = np.array([[1.0, -2.0]])
        k = np.array([[0.3, 0.4]])
        v = np.array([[5.0, 7.0]])
        got = point_attention(
            T.constant(q), T.constant(k), T.constant(v), full_neighborhood(1, 1)
        ).data
        np.testing.assert_allclose(got, v + q, atol=1e-12)


class TestGatedAttention:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            nq, nk, d = int(rng.integers(1, 7)), int(rng.integers(1, 7)), 4
            q, k, v = (rng.normal(size=(n, d)) for n in (nq, nk, nk))
            gq = rng.uniform(0.1, 0.9, size=(nq, 1))
            gv = rng.uniform(0.1, 0.9, size=(nk, 1))
            got = point_voxel_attention(
                T.constant(q), T.constant(k), T.constant(v),
                T.constant(gq), T.constant(gv), full_neighborhood(nq, nk),
            ).data
            want = dense_gated(q, k, v, gq[:, 0], gv[:, 0])
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_saturated_gates_reduce_to_standard(self):
        rng = np.random.default_rng(6)
        nq, nk, d = 6, 9, 5
        q, k, v = (rng.normal(size=(n, d)) for n in (nq, nk, nk))
        nbhd = full_neighborhood(nq, nk)
        gated = point_voxel_attention(
            T.constant(q), T.constant(k), T.constant(v),
            T.constant(np.ones((nq, 1))), T.constant(np.zeros((nk, 1))), nbhd,
        ).data
        plain = standard_attention(T.constant(q), T.constant(k), T.constant(v), nbhd).data
        assert np.abs(gated - plain).max() <= 1e-6

    def test_zero_qk_gate_means_uniform_weights(self):
        rng = np.random.default_rng(7)
        q, k, v = (rng.normal(size=(1, 3)), rng.normal(size=(4, 3)),
                   rng.normal(size=(4, 3)))
        got = point_voxel_attention(
            T.constant(q), T.constant(k), T.constant(v),
            T.constant(np.zeros((1, 1))), T.constant(np.zeros((4, 1))),
            full_neighborhood(1, 4),
        ).data
        np.testing.assert_allclose(got[0], v.mean(axis=0), atol=1e-12)

    def test_gate_shape_validation(self):
        q = T.constant(np.ones((2, 3)))
        kv = T.constant(np.ones((4, 3)))
        with pytest.raises(ValueError):
            point_voxel_attention(
                q, kv, kv, T.constant(np.ones((3, 1))), T.constant(np.zeros((4, 1))),
                full_neighborhood(2, 4),
            )


class TestSegmentSoftmax:
    @given(st.integers(1, 5), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_sums_to_one_per_segment(self, segs, seed):
        rng = np.random.default_rng(seed)
        ids = np.sort(rng.integers(0, segs, size=12))
        w = segment_softmax(T.constant(rng.normal(size=12)), ids, segs).data
        for s in np.unique(ids):
            assert abs(w[ids == s].sum() - 1.0) < 1e-12

    def test_shift_invariance_within_segment(self):
        ids = np.array([0, 0, 0, 1, 1])
        x = np.array([0.1, -0.5, 2.0, 1.0, 3.0])
        shifted = x.copy()
        shifted[:3] += 50.0
        a = segment_softmax(T.constant(x), ids, 2).data
        b = segment_softmax(T.constant(shifted), ids, 2).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestNeighborhoods:
    def test_radius_neighborhood_matches_bruteforce(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            n_q, n_k = int(rng.integers(1, 30)), int(rng.integers(1, 30))
            qs = rng.uniform(-2, 2, size=(n_q, 3))
            ks = rng.uniform(-2, 2, size=(n_k, 3))
            radius = float(rng.uniform(0.3, 2.0))
            nbhd = radius_neighborhood(qs, ks, radius)
            got = set(zip(nbhd.query_ids.tolist(), nbhd.key_ids.tolist()))
            d = np.linalg.norm(qs[:, None, :] - ks[None, :, :], axis=2)
            want = set(zip(*np.nonzero(d <= radius)))
            assert got == want

    def test_pairs_sorted_by_query_then_key(self):
        rng = np.random.default_rng(9)
        qs = rng.uniform(-1, 1, size=(10, 3))
        nbhd = radius_neighborhood(qs, qs, 1.5)
        order = np.lexsort((nbhd.key_ids, nbhd.query_ids))
        np.testing.assert_array_equal(order, np.arange(len(order)))


class TestFusionStack:
    def _stack(self, depth=2, radius=np.inf):
        rng = np.random.default_rng(10)
        return FusionStack(6, 8, 12, depth, rng, radius=radius), rng

    def test_output_shapes(self):
        stack, rng = self._stack()
        n = 7
        out = stack(T.constant(rng.normal(size=(n, 6))), T.constant(rng.normal(size=(n, 8))))
        assert out.fused.shape == (n, 12)
        assert out.point_tokens.shape == (n, 6)
        assert out.vb_tokens.shape == (n, 8)
        assert len(out.attended) == 2

    def test_token_count_mismatch_raises(self):
        stack, rng = self._stack()
        with pytest.raises(ValueError):
            stack(T.constant(rng.normal(size=(3, 6))), T.constant(rng.normal(size=(4, 8))))

    def test_depth_zero_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            FusionStack(4, 4, 4, 0, rng)

    def test_finite_radius_localizes(self):
        # two far-apart keypoints with a small radius: perturbing one
        # point's features must not change the other's fused output
        stack, rng = self._stack(depth=1, radius=0.5)
        xyz = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        pf = rng.normal(size=(2, 6))
        vf = rng.normal(size=(2, 8))
        base = stack(T.constant(pf), T.constant(vf), xyz).fused.data
        pf2 = pf.copy()
        pf2[1] += 3.0
        out = stack(T.constant(pf2), T.constant(vf), xyz).fused.data
        np.testing.assert_allclose(out[0], base[0], atol=1e-12)
        assert np.abs(out[1] - base[1]).max() > 1e-6

    def test_gradients_reach_all_parameters(self):
        stack, rng = self._stack(depth=1)
        pf = T.parameter(rng.normal(size=(5, 6)))
        vf = T.parameter(rng.normal(size=(5, 8)))
        out = stack(pf, vf)
        T.sum_(T.mul(out.fused, out.fused)).backward()
        missing = [name for name, p in stack.params().items() if p.grad is None
                   or not np.any(p.grad)]
        assert missing == [], f"no gradient reached {missing}"
