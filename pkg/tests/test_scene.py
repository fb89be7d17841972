"""Voxel hierarchy, BEV projection, FPS keypoints, and the hash grid."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvkit import tensor as T
from pvkit.config import DetectorConfig
from pvkit.neighbors import HashGrid
from pvkit.scene import (
    SceneEncoder,
    _coarsen,
    fps_sample,
    voxel_descriptors,
    voxelize,
)


def tiny_cfg(**overrides):
    base = dict(num_keypoints=24, fusion_radius=1.0)
    base.update(overrides)
    return dataclasses.replace(DetectorConfig.toy(), **base)


def sample_cloud(rng, n=120):
    cfg = DetectorConfig.toy()
    pts = np.column_stack([
        rng.uniform(cfg.x_min + 0.2, cfg.x_max - 0.2, n),
        rng.uniform(cfg.y_min + 0.2, cfg.y_max - 0.2, n),
        rng.uniform(cfg.z_min + 0.2, cfg.z_max - 0.2, n),
        rng.uniform(0.0, 1.0, n),
    ])
    return pts


class TestVoxelize:
    def test_floor_convention(self):
        cfg = tiny_cfg()
        # toy grid: origin (0, -6.4, -2), cell (0.1, 0.1, 0.25)
        pts = np.array([[0.05, -6.35, -1.99, 0.0], [0.25, 0.0, 0.0, 0.0]])
        grid = voxelize(pts, cfg)
        np.testing.assert_array_equal(grid.indices, [[0, 0, 0], [2, 64, 8]])

    def test_upper_bound_is_exclusive(self):
        cfg = tiny_cfg()
        pts = np.array([
            [12.8, 0.0, 0.0, 0.0],    # at x_max: dropped
            [12.79, 0.0, 0.0, 0.0],   # just inside: kept
            [0.0, -6.4, 0.0, 0.0],    # at y_min: kept
            [-0.01, 0.0, 0.0, 0.0],   # below x_min: dropped
        ])
        grid = voxelize(pts, cfg)
        assert grid.num_voxels == 2
        flat = np.concatenate(grid.point_lists)
        assert sorted(flat.tolist()) == [1, 2]

    def test_indices_sorted_and_unique(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(3)
        grid = voxelize(sample_cloud(rng), cfg)
        as_rows = [tuple(r) for r in grid.indices]
        assert as_rows == sorted(as_rows)
        assert len(set(as_rows)) == len(as_rows)

    def test_point_lists_partition_kept_points(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(4)
        pts = sample_cloud(rng, n=80)
        grid = voxelize(pts, cfg)
        flat = np.concatenate(grid.point_lists)
        assert sorted(flat.tolist()) == list(range(80))
        # every member actually falls in its voxel
        size = np.array(cfg.voxel_size)
        origin = np.array([cfg.x_min, cfg.y_min, cfg.z_min])
        for vox, members in zip(grid.indices, grid.point_lists):
            got = np.floor((pts[members, :3] - origin) / size).astype(np.int64)
            np.testing.assert_array_equal(got, np.broadcast_to(vox, got.shape))

    def test_centers(self):
        cfg = tiny_cfg()
        grid = voxelize(np.array([[0.05, -6.35, -1.9, 0.0]]), cfg)
        np.testing.assert_allclose(grid.centers(), [[0.05, -6.35, -1.875]])

    def test_empty_and_validation(self):
        cfg = tiny_cfg()
        grid = voxelize(np.empty((0, 4)), cfg)
        assert grid.num_voxels == 0
        with pytest.raises(ValueError):
            voxelize(np.zeros(6), cfg)
        with pytest.raises(ValueError):
            voxelize(np.zeros((4, 2)), cfg)


class TestVoxelDescriptors:
    def test_hand_case(self):
        cfg = tiny_cfg()
        pts = np.array([[0.02, 0.0, 0.0, 0.5], [0.08, 0.0, 0.0, 0.7]])
        grid = voxelize(pts, cfg)
        assert grid.num_voxels == 1
        desc = voxel_descriptors(pts, grid)
        # center of voxel (0, 64, 8) is (0.05, 0.05, 0.125)
        np.testing.assert_allclose(desc[0, :3], [0.0, -0.05, -0.125], atol=1e-12)
        np.testing.assert_allclose(desc[0, 3], 0.6)
        np.testing.assert_allclose(desc[0, 4], 0.7)
        np.testing.assert_allclose(desc[0, 5], np.log1p(2))

    def test_no_intensity_column(self):
        cfg = tiny_cfg()
        pts = np.array([[0.02, 0.0, 0.0], [0.08, 0.0, 0.0]])
        desc = voxel_descriptors(pts, voxelize(pts, cfg))
        assert desc[0, 3] == 0.0 and desc[0, 4] == 0.0

    def test_offsets_stay_inside_voxel(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(5)
        pts = sample_cloud(rng)
        desc = voxel_descriptors(pts, voxelize(pts, cfg))
        half = np.array(cfg.voxel_size) / 2
        assert (np.abs(desc[:, :3]) <= half + 1e-12).all()


class TestCoarsen:
    def test_parent_mapping(self):
        idx = np.array([[0, 0, 0], [1, 1, 1], [2, 0, 0], [3, 1, 0]])
        uniq, rows = _coarsen(idx)
        np.testing.assert_array_equal(uniq, [[0, 0, 0], [1, 0, 0]])
        np.testing.assert_array_equal(rows, [0, 0, 1, 1])

    def test_empty(self):
        uniq, rows = _coarsen(np.empty((0, 3), np.int64))
        assert uniq.shape == (0, 3) and rows.shape == (0,)


class TestFpsSample:
    def fps_oracle(self, pts, k):
        # same greedy rule, recomputed from the full distance matrix
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        chosen = [0]
        for _ in range(1, k):
            min_d = d2[:, chosen].min(axis=1)
            chosen.append(int(np.argmax(min_d)))
        return np.array(chosen)

    def test_starts_at_zero(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert fps_sample(pts, 3)[0] == 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n = int(rng.integers(2, 40))
            pts = rng.normal(size=(n, 3))
            k = int(rng.integers(1, n + 1))
            np.testing.assert_array_equal(fps_sample(pts, k), self.fps_oracle(pts, k))

    def test_full_sample_is_permutation(self):
        pts = np.random.default_rng(1).normal(size=(12, 3))
        idx = fps_sample(pts, 12)
        assert sorted(idx.tolist()) == list(range(12))

    def test_tie_prefers_first_index(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
        np.testing.assert_array_equal(fps_sample(pts, 2), [0, 1])

    def test_k_bounds(self):
        pts = np.zeros((4, 3))
        with pytest.raises(ValueError):
            fps_sample(pts, 0)
        with pytest.raises(ValueError):
            fps_sample(pts, 5)


class TestHashGrid:
    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_pairs_match_brute_force(self, data):
        n = data.draw(st.integers(0, 40), label="n")
        m = data.draw(st.integers(1, 6), label="m")
        dim = data.draw(st.sampled_from([2, 3]), label="dim")
        seed = data.draw(st.integers(0, 2**31 - 1), label="seed")
        radius = data.draw(st.floats(0.05, 2.0), label="radius")
        cell = data.draw(st.floats(0.1, 1.5), label="cell")
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-3, 3, size=(n, dim))
        centers = rng.uniform(-3, 3, size=(m, dim))
        grid = HashGrid(pts, cell)
        cid, pid = grid.query_pairs(centers, radius)
        got = set(zip(cid.tolist(), pid.tolist()))
        d = np.linalg.norm(pts[None, :, :] - centers[:, None, :], axis=2) if n else np.zeros((m, 0))
        want = set(zip(*np.nonzero(d <= radius + 1e-12)))
        assert got == {(int(a), int(b)) for a, b in want}
        # sorted by center then point
        order = np.lexsort((pid, cid))
        np.testing.assert_array_equal(cid, cid[order])
        np.testing.assert_array_equal(pid, pid[order])

    def test_query_ball_ascending(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-1, 1, size=(30, 3))
        grid = HashGrid(pts, 0.4)
        idx = grid.query_ball(np.zeros(3), 0.8)
        assert (np.diff(idx) > 0).all()

    def test_boundary_point_included(self):
        pts = np.array([[1.0, 0.0, 0.0]])
        grid = HashGrid(pts, 0.5)
        assert grid.query_ball(np.zeros(3), 1.0).tolist() == [0]

    def test_empty_grid(self):
        grid = HashGrid(np.empty((0, 3)), 1.0)
        cid, pid = grid.query_pairs(np.zeros((2, 3)), 1.0)
        assert len(cid) == 0 and len(pid) == 0

    def test_validation(self):
        with pytest.raises(ValueError):
            HashGrid(np.zeros((3, 4)), 1.0)
        with pytest.raises(ValueError):
            HashGrid(np.zeros((3, 3)), 0.0)
        grid = HashGrid(np.zeros((3, 3)), 1.0)
        with pytest.raises(ValueError):
            grid.query_ball(np.zeros(2), 1.0)
        with pytest.raises(ValueError):
            grid.query_pairs(np.zeros((2, 2)), 1.0)


class TestHierarchy:
    def test_level_shapes_halve(self):
        cfg = tiny_cfg()
        assert cfg.grid_shape(0) == (128, 128, 16)
        assert cfg.grid_shape(1) == (64, 64, 8)
        assert cfg.grid_shape(2) == (32, 32, 4)
        assert cfg.grid_shape(3) == (16, 16, 2)
        assert cfg.bev_shape == (16, 16)

    def test_levels_nest(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(8)
        enc = SceneEncoder(cfg, np.random.default_rng(0))
        levels = enc.voxel_hierarchy(sample_cloud(rng))
        for lvl in range(4):
            assert levels[lvl].feats.shape == (len(levels[lvl].indices), cfg.voxel_dims[lvl])
        for child, parent in zip(levels[:-1], levels[1:]):
            child_parents = {tuple(r) for r in child.indices // 2}
            assert child_parents == {tuple(r) for r in parent.indices}

    def test_feature_rows_finite(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(1))
        levels = enc.voxel_hierarchy(sample_cloud(np.random.default_rng(9)))
        for level in levels:
            assert np.isfinite(level.feats.data).all()


class TestBevProjection:
    def setup_method(self):
        self.cfg = tiny_cfg()
        self.enc = SceneEncoder(self.cfg, np.random.default_rng(2))
        self.pts = sample_cloud(np.random.default_rng(10))
        self.levels = self.enc.voxel_hierarchy(self.pts)
        self.bev = self.enc.bev_project(self.levels)

    def test_cells_sorted_unique(self):
        rows = [tuple(r) for r in self.bev.cells]
        assert rows == sorted(rows) and len(set(rows)) == len(rows)

    def test_cells_cover_coarse_levels(self):
        want = {tuple(r) for r in self.levels[2].indices[:, :2] // 2}
        want |= {tuple(r) for r in self.levels[3].indices[:, :2]}
        assert {tuple(r) for r in self.bev.cells} == want

    def test_dense_zero_off_support(self):
        h, w = self.bev.shape
        dense = self.bev.dense().data
        assert dense.shape == (h * w, self.cfg.bev_dim)
        flat = self.bev.cells[:, 0] * w + self.bev.cells[:, 1]
        np.testing.assert_array_equal(dense[flat], self.bev.feats.data)
        mask = np.ones(h * w, bool)
        mask[flat] = False
        assert (dense[mask] == 0.0).all()

    def test_empty_cloud(self):
        bev = self.enc.bev_project(self.enc.voxel_hierarchy(np.empty((0, 4))))
        assert len(bev.cells) == 0
        assert (bev.dense().data == 0.0).all()


class TestKeypoints:
    def test_sample_count_clamps(self):
        cfg = tiny_cfg(num_keypoints=8)
        enc = SceneEncoder(cfg, np.random.default_rng(0))
        pts = sample_cloud(np.random.default_rng(12), n=5)
        idx, xyz = enc.sample_keypoints(pts)
        assert len(idx) == 5
        np.testing.assert_array_equal(xyz, pts[idx, :3])

    def test_isolated_keypoint_encodes_zero_offset(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(3))
        pts = np.array([[4.0, 0.0, 0.0, 0.6]])
        feats = enc.keypoint_features(pts, pts[:, :3])
        raw = T.constant(np.array([[0.0, 0.0, 0.0, 0.6]]))
        want = enc.point_enc2(enc.point_enc1(raw)).data
        np.testing.assert_allclose(feats.data, want, atol=1e-12)

    def test_cloud_order_invariance(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(4))
        rng = np.random.default_rng(13)
        pts = sample_cloud(rng, n=60)
        kp = pts[:5, :3]
        base = enc.keypoint_features(pts, kp).data
        perm = rng.permutation(60)
        again = enc.keypoint_features(pts[perm], kp).data
        np.testing.assert_allclose(again, base, atol=1e-12)


class TestVbTokens:
    def test_token_width(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(5))
        scene = enc.encode(sample_cloud(np.random.default_rng(14)))
        assert scene.vb_feats.shape == (len(scene.keypoint_xyz), cfg.vb_token_dim)
        assert scene.point_feats.shape == (len(scene.keypoint_xyz), cfg.point_feat_dim)

    def test_far_keypoint_gets_zero_voxel_parts(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(6))
        # all cloud points near one corner; probe a keypoint far away
        pts = np.column_stack([
            np.random.default_rng(15).uniform(0.5, 1.5, (30, 3)) * [1, 1, 0.5],
            np.zeros(30),
        ])
        levels = enc.voxel_hierarchy(pts)
        bev = enc.bev_project(levels)
        probe = np.array([[12.0, 5.0, 1.5]])
        tok = enc.vb_tokens(levels, bev, probe).data
        assert tok.shape == (1, cfg.vb_token_dim)
        assert (tok == 0.0).all()

    def test_bev_sample_at_cell_center(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(7))
        pts = sample_cloud(np.random.default_rng(16))
        bev = enc.bev_project(enc.voxel_hierarchy(pts))
        ix, iy = bev.cells[0]
        center = np.array([
            [cfg.x_min + (ix + 0.5) * bev.cell[0],
             cfg.y_min + (iy + 0.5) * bev.cell[1],
             0.0]
        ])
        got = enc._bev_sample(bev, center).data
        # 0.8 m cells are not exactly representable, so the probe sits a
        # few ulp off center and neighbors contribute O(1e-16) weight
        np.testing.assert_allclose(got[0], bev.feats.data[0], atol=1e-12)

    def test_bev_sample_interpolates(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(8))
        pts = sample_cloud(np.random.default_rng(17), n=300)
        bev = enc.bev_project(enc.voxel_hierarchy(pts))
        lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(bev.cells)}
        # find two horizontally adjacent occupied cells and probe between them
        pair = next(
            ((a, b) for (a, b) in lookup if (a + 1, b) in lookup), None
        )
        assert pair is not None, "need adjacent occupied cells for this seed"
        a, b = pair
        mid = np.array([
            [cfg.x_min + (a + 1.0) * bev.cell[0],
             cfg.y_min + (b + 0.5) * bev.cell[1],
             0.0]
        ])
        got = enc._bev_sample(bev, mid).data[0]
        want = 0.5 * (bev.feats.data[lookup[(a, b)]] + bev.feats.data[lookup[(a + 1, b)]])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_out_of_grid_keypoint_zero(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(9))
        pts = sample_cloud(np.random.default_rng(18))
        bev = enc.bev_project(enc.voxel_hierarchy(pts))
        got = enc._bev_sample(bev, np.array([[100.0, 100.0, 0.0]])).data
        assert (got == 0.0).all()


class TestEncode:
    def test_empty_cloud(self):
        cfg = tiny_cfg()
        enc = SceneEncoder(cfg, np.random.default_rng(10))
        scene = enc.encode(np.empty((0, 4)))
        assert len(scene.keypoint_indices) == 0
        assert scene.point_feats.shape == (0, cfg.point_feat_dim)
        assert scene.vb_feats.shape == (0, cfg.vb_token_dim)

    def test_gradients_reach_every_parameter(self):
        cfg = tiny_cfg(num_keypoints=16)
        enc = SceneEncoder(cfg, np.random.default_rng(11))
        scene = enc.encode(sample_cloud(np.random.default_rng(19)))
        loss = T.add(T.sum_(scene.point_feats), T.sum_(scene.vb_feats))
        loss.backward()
        for name, param in enc.params().items():
            assert param.grad is not None, name
            assert np.isfinite(param.grad).all(), name

    def test_encode_deterministic(self):
        cfg = tiny_cfg()
        pts = sample_cloud(np.random.default_rng(20))
        a = SceneEncoder(cfg, np.random.default_rng(12)).encode(pts)
        b = SceneEncoder(cfg, np.random.default_rng(12)).encode(pts)
        assert a.vb_feats.data.tobytes() == b.vb_feats.data.tobytes()
        assert a.point_feats.data.tobytes() == b.point_feats.data.tobytes()
        np.testing.assert_array_equal(a.keypoint_indices, b.keypoint_indices)
