"""Scene encoding: voxel hierarchy, BEV projection, keypoints, fused tokens.

A raw cloud (x, y, z, intensity) becomes:

* a 4-level sparse voxel feature hierarchy (each level pools 2x2x2
  blocks of the previous one and re-embeds),
* a sparse bird's-eye-view map built from the coarsest level by
  concatenating its z slices channel-wise (cells with no occupied
  voxel stay exactly zero),
* farthest-point-sampled keypoints with a small max-pooled local
  encoder, and
* per-keypoint voxel+BEV tokens: radius-averaged voxel features from
  every level plus a bilinear BEV sample, concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import DetectorConfig
from .neighbors import HashGrid
from .nn import Dense, LayerNorm, merge_params
from .tensor import Tensor


@dataclass
class VoxelGrid:
    """Level-0 occupancy: sorted voxel indices and the points in each."""

    indices: np.ndarray  # (K, 3) int, lexicographically sorted
    point_lists: list[np.ndarray]  # per voxel, indices into the cloud
    shape: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]

    @property
    def num_voxels(self) -> int:
        return len(self.indices)

    def centers(self) -> np.ndarray:
        return (self.indices + 0.5) * np.array(self.voxel_size) + np.array(self.origin)


@dataclass
class LevelFeatures:
    """One hierarchy level: sorted indices and a row-aligned feature tensor."""

    indices: np.ndarray  # (K, 3) int
    feats: Tensor  # (K, C)
    shape: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]

    def centers(self) -> np.ndarray:
        return (self.indices + 0.5) * np.array(self.voxel_size) + np.array(self.origin)


@dataclass
class BevMap:
    """Sparse H x W x C bird's-eye-view grid; absent cells are zero."""

    shape: tuple[int, int]
    cell: tuple[float, float]
    origin: tuple[float, float]
    cells: np.ndarray  # (K, 2) int (ix, iy), sorted
    feats: Tensor  # (K, C)

    def dense(self) -> Tensor:
        """Materialise the full (H*W, C) matrix, zeros where unoccupied."""
        h, w = self.shape
        flat = self.cells[:, 0] * w + self.cells[:, 1] if len(self.cells) else np.empty(0, np.int64)
        return T.scatter_rows(self.feats, flat, h * w)


@dataclass
class EncodedScene:
    keypoint_indices: np.ndarray
    keypoint_xyz: np.ndarray  # (K, 3)
    point_feats: Tensor  # (K, point_feat_dim)
    vb_feats: Tensor  # (K, vb_token_dim)
    bev: BevMap
    levels: list[LevelFeatures]


def voxelize(points: np.ndarray, cfg: DetectorConfig) -> VoxelGrid:
    """Bucket in-range points into the level-0 grid (floor convention).

    Points at or beyond the upper range bound are dropped, matching the
    half-open range [min, max) on every axis.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError(f"expected (N, >=3) points, got {pts.shape}")
    origin = (cfg.x_min, cfg.y_min, cfg.z_min)
    shape = cfg.grid_shape(0)
    size = np.array(cfg.voxel_size)
    rel = pts[:, :3] - np.array(origin)
    idx = np.floor(rel / size).astype(np.int64)
    in_range = np.all(idx >= 0, axis=1) & np.all(idx < np.array(shape), axis=1)
    idx = idx[in_range]
    kept = np.nonzero(in_range)[0]
    if len(idx) == 0:
        return VoxelGrid(np.empty((0, 3), np.int64), [], shape, cfg.voxel_size, origin)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx_sorted = idx[order]
    kept_sorted = kept[order]
    change = np.nonzero(np.any(np.diff(idx_sorted, axis=0) != 0, axis=1))[0] + 1
    starts = np.concatenate([[0], change, [len(idx_sorted)]])
    uniq = idx_sorted[starts[:-1]]
    lists = [kept_sorted[lo:hi] for lo, hi in zip(starts[:-1], starts[1:])]
    return VoxelGrid(uniq, lists, shape, cfg.voxel_size, origin)


def voxel_descriptors(points: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """Per-voxel raw features: mean offset from center, intensity stats, count."""
    pts = np.asarray(points, dtype=np.float64)
    v = grid.num_voxels
    out = np.zeros((v, 6))
    if v == 0:
        return out
    counts = np.array([len(m) for m in grid.point_lists])
    flat = np.concatenate(grid.point_lists)
    seg = np.repeat(np.arange(v), counts)
    sums = np.zeros((v, 3))
    np.add.at(sums, seg, pts[flat, :3])
    out[:, 0:3] = sums / counts[:, None] - grid.centers()
    if pts.shape[1] > 3:
        isum = np.zeros(v)
        imax = np.full(v, -np.inf)
        np.add.at(isum, seg, pts[flat, 3])
        np.maximum.at(imax, seg, pts[flat, 3])
        out[:, 3] = isum / counts
        out[:, 4] = imax
    out[:, 5] = np.log1p(counts)
    return out


def _coarsen(indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map child voxel indices to their 2x-coarser parents.

    Returns the sorted unique parent indices and, per child, the row of
    its parent.
    """
    parents = indices // 2
    if len(parents) == 0:
        return np.empty((0, 3), np.int64), np.empty(0, np.int64)
    uniq, inverse = np.unique(parents, axis=0, return_inverse=True)
    return uniq, inverse.astype(np.int64)


def fps_sample(xyz: np.ndarray, k: int) -> np.ndarray:
    """Farthest-point sampling, always starting from index 0.

    Greedy: each round picks the point with the largest distance to the
    set already chosen (first index wins ties). Returns k indices.
    """
    pts = np.asarray(xyz, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    min_d2 = ((pts - pts[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


class SceneEncoder:
    """All learned pieces of the scene encoding stage."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        self.cfg = cfg
        dims = cfg.voxel_dims
        self.voxel_embed = Dense(6, dims[0], rng, "encoder.voxel_embed", activation="relu")
        self.level_proj = [
            Dense(dims[i], dims[i + 1], rng, f"encoder.level{i + 1}_proj", activation="relu")
            for i in range(3)
        ]
        nz2, nz3 = cfg.grid_shape(2)[2], cfg.grid_shape(3)[2]
        bev_in = 4 * nz2 * dims[2] + nz3 * dims[3]
        self.bev_proj = Dense(bev_in, cfg.bev_dim, rng, "encoder.bev_proj", activation="relu")
        # normalizing occupied cells keeps their features O(1) so the linear
        # detection head separates them without fighting tiny magnitudes;
        # empty cells never pass through here and stay exactly zero
        self.bev_norm = LayerNorm(cfg.bev_dim, "encoder.bev_norm")
        self.point_enc1 = Dense(4, cfg.point_feat_dim, rng, "encoder.point_enc1", activation="relu")
        self.point_enc2 = Dense(
            cfg.point_feat_dim, cfg.point_feat_dim, rng, "encoder.point_enc2", activation="relu"
        )

    def params(self) -> dict[str, Tensor]:
        groups = [self.voxel_embed.params(), self.bev_proj.params(), self.bev_norm.params(),
                  self.point_enc1.params(), self.point_enc2.params()]
        groups.extend(layer.params() for layer in self.level_proj)
        return merge_params(*groups)

    # -- stages ---------------------------------------------------------------

    def voxel_hierarchy(self, points: np.ndarray) -> list[LevelFeatures]:
        cfg = self.cfg
        grid = voxelize(points, cfg)
        desc = voxel_descriptors(points, grid)
        feats = self.voxel_embed(T.constant(desc))
        levels = [
            LevelFeatures(grid.indices, feats, grid.shape, cfg.voxel_size, grid.origin)
        ]
        for lvl in range(1, 4):
            prev = levels[-1]
            uniq, parent_row = _coarsen(prev.indices)
            pooled = T.segment_mean(prev.feats, parent_row, len(uniq))
            projected = self.level_proj[lvl - 1](pooled)
            size = tuple(s * 2.0 for s in prev.voxel_size)
            levels.append(
                LevelFeatures(uniq, projected, cfg.grid_shape(lvl), size, prev.origin)
            )
        return levels

    def bev_project(self, levels: list[LevelFeatures]) -> BevMap:
        """Collapse the two coarsest levels into a sparse BEV map.

        Every used voxel keeps its own slot inside the owning BEV cell
        (sub-column position and z slice), so a cell's stacked vector
        preserves where inside the cell the occupancy sits before the
        projection mixes it.
        """
        cfg = self.cfg
        h, w = cfg.bev_shape
        used = levels[2:4]
        if all(len(level.indices) == 0 for level in used):
            empty = T.constant(np.zeros((0, cfg.bev_dim)))
            return BevMap((h, w), cfg.bev_cell, (cfg.x_min, cfg.y_min),
                          np.empty((0, 2), np.int64), empty)
        cells_per_level = []
        for lvl, level in zip((2, 3), used):
            ratio = 1 << (3 - lvl)
            cells_per_level.append(level.indices[:, :2] // ratio)
        uniq, cell_row = np.unique(np.vstack(cells_per_level), axis=0, return_inverse=True)
        parts = []
        offset = 0
        for lvl, level, cells in zip((2, 3), used, cells_per_level):
            ratio = 1 << (3 - lvl)
            nz = cfg.grid_shape(lvl)[2]
            c = cfg.voxel_dims[lvl]
            slots = ratio * ratio * nz
            sub = (level.indices[:, 0] % ratio) * ratio + level.indices[:, 1] % ratio
            rows = cell_row[offset:offset + len(cells)]
            slot = (rows * slots) + sub * nz + level.indices[:, 2]
            stacked = T.scatter_rows(level.feats, slot, len(uniq) * slots)
            parts.append(T.reshape(stacked, (len(uniq), slots * c)))
            offset += len(cells)
        per_cell = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        feats = self.bev_norm(self.bev_proj(per_cell))
        return BevMap((h, w), cfg.bev_cell, (cfg.x_min, cfg.y_min), uniq, feats)

    def sample_keypoints(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) == 0:
            return np.empty(0, np.int64), np.empty((0, 3))
        k = min(self.cfg.num_keypoints, len(pts))
        idx = fps_sample(pts[:, :3], k)
        return idx, pts[idx, :3]

    def keypoint_features(self, points: np.ndarray, kp_xyz: np.ndarray) -> Tensor:
        """Max-pooled two-layer encoding of each keypoint's neighborhood.

        A neighborhood is every cloud point within the keypoint radius
        (the keypoint itself included); an isolated keypoint therefore
        encodes its own zero offset.
        """
        cfg = self.cfg
        k = len(kp_xyz)
        if k == 0:
            return T.constant(np.zeros((0, cfg.point_feat_dim)))
        pts = np.asarray(points, dtype=np.float64)
        grid = HashGrid(pts[:, :3], cfg.keypoint_radius)
        kp_ids, pt_ids = grid.query_pairs(kp_xyz, cfg.keypoint_radius)
        rel = pts[pt_ids, :3] - kp_xyz[kp_ids]
        intensity = pts[pt_ids, 3:4] if pts.shape[1] > 3 else np.zeros((len(pt_ids), 1))
        raw = T.constant(np.hstack([rel, intensity]))
        encoded = self.point_enc2(self.point_enc1(raw))
        return T.segment_max(encoded, kp_ids, k)

    def vb_tokens(self, levels: list[LevelFeatures], bev: BevMap, kp_xyz: np.ndarray) -> Tensor:
        """Per-keypoint voxel+BEV token: radius-pooled level features + BEV."""
        cfg = self.cfg
        k = len(kp_xyz)
        parts: list[Tensor] = []
        for level, radius in zip(levels, cfg.voxel_token_radii):
            c = level.feats.shape[1]
            if k == 0 or len(level.indices) == 0:
                parts.append(T.constant(np.zeros((k, c))))
                continue
            centers = level.centers()
            grid = HashGrid(centers, max(radius, 1e-6))
            kp_ids, vox_ids = grid.query_pairs(kp_xyz, radius)
            if len(kp_ids) == 0:
                parts.append(T.constant(np.zeros((k, c))))
                continue
            gathered = T.gather_rows(level.feats, vox_ids)
            parts.append(T.segment_mean(gathered, kp_ids, k))
        parts.append(self._bev_sample(bev, kp_xyz))
        return T.concat(parts, axis=1)

    def _bev_sample(self, bev: BevMap, kp_xyz: np.ndarray) -> Tensor:
        """Bilinear interpolation of the sparse BEV map at keypoint xy."""
        c = bev.feats.shape[1] if bev.feats.ndim == 2 else self.cfg.bev_dim
        k = len(kp_xyz)
        if k == 0 or len(bev.cells) == 0:
            return T.constant(np.zeros((k, c)))
        h, w = bev.shape
        lookup = {(int(ix), int(iy)): row for row, (ix, iy) in enumerate(bev.cells)}
        u = (kp_xyz[:, 0] - bev.origin[0]) / bev.cell[0] - 0.5
        v = (kp_xyz[:, 1] - bev.origin[1]) / bev.cell[1] - 0.5
        iu = np.floor(u).astype(np.int64)
        iv = np.floor(v).astype(np.int64)
        fu = u - iu
        fv = v - iv
        kp_ids: list[int] = []
        rows: list[int] = []
        weights: list[float] = []
        for i in range(k):
            for du, dv, wgt in (
                (0, 0, (1 - fu[i]) * (1 - fv[i])),
                (1, 0, fu[i] * (1 - fv[i])),
                (0, 1, (1 - fu[i]) * fv[i]),
                (1, 1, fu[i] * fv[i]),
            ):
                cx, cy = iu[i] + du, iv[i] + dv
                if wgt == 0.0 or not (0 <= cx < h and 0 <= cy < w):
                    continue
                row = lookup.get((cx, cy))
                if row is not None:
                    kp_ids.append(i)
                    rows.append(row)
                    weights.append(wgt)
        if not rows:
            return T.constant(np.zeros((k, c)))
        gathered = T.gather_rows(bev.feats, np.array(rows))
        weighted = T.mul(gathered, T.constant(np.array(weights)[:, None]))
        return T.segment_sum(weighted, np.array(kp_ids), k)

    def encode(self, points: np.ndarray) -> EncodedScene:
        """Run the full encoding stage on one cloud."""
        pts = np.asarray(points, dtype=np.float64)
        levels = self.voxel_hierarchy(pts)
        bev = self.bev_project(levels)
        kp_idx, kp_xyz = self.sample_keypoints(pts)
        point_feats = self.keypoint_features(pts, kp_xyz)
        vb = self.vb_tokens(levels, bev, kp_xyz)
        return EncodedScene(kp_idx, kp_xyz, point_feats, vb, bev, levels)
