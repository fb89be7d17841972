"""Second-stage feature pooling: density clustering plus grid pyramids.

For every proposal box the pool produces one fused feature row from two
routes:

* clustering route: keypoints inside the margin-enlarged box are
  density-clustered; cluster members are encoded together with their
  offset from the cluster centroid, max-pooled per cluster and then
  across clusters, so isolated noise points contribute nothing;
* pyramid route: lattices of grid points at several box scales attend
  to nearby keypoints with a positional query built from the
  grid-to-point offset; all grid features are flattened, projected, and
  joined with the clustering feature.

A plain grid head (radius-averaged features on a single lattice, no
attention, background included) is kept as an ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import DetectorConfig
from .fusion import Neighborhood, point_voxel_attention, segment_softmax
from .geometry import Box3D, enlarge_box, generate_grid_points, points_in_box
from .neighbors import HashGrid
from .nn import Dense, merge_params
from .tensor import Tensor


@dataclass
class ClusterResult:
    """Density clustering output: labels, clusters in discovery order, noise."""

    labels: np.ndarray  # (N,), -1 for noise
    clusters: list[np.ndarray]  # ascending index arrays
    noise: np.ndarray  # ascending indices
    centroids: np.ndarray  # (num_clusters, 3)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> ClusterResult:
    """Classic density clustering, deterministic in the input order.

    A point is core when at least ``min_pts`` points (itself included)
    lie within ``eps``. Clusters are the density-connected components of
    core points, discovered by scanning indices in order; a non-core
    point within ``eps`` of a core joins the first cluster that reaches
    it, everything else is noise.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"expected (N, D) points, got {pts.shape}")
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"need eps > 0 and min_pts >= 1, got {eps}, {min_pts}")
    n = len(pts)
    if n == 0:
        return ClusterResult(np.empty(0, np.int64), [], np.empty(0, np.int64), np.empty((0, pts.shape[1] if pts.ndim == 2 else 3)))
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    adj = d2 <= eps * eps
    counts = adj.sum(axis=1)
    core = counts >= min_pts
    unvisited, noise_mark = -2, -1
    labels = np.full(n, unvisited, dtype=np.int64)
    next_cluster = 0
    for start in range(n):
        if labels[start] != unvisited:
            continue
        if not core[start]:
            labels[start] = noise_mark
            continue
        cluster = next_cluster
        next_cluster += 1
        labels[start] = cluster
        queue = list(np.nonzero(adj[start])[0])
        head = 0
        while head < len(queue):
            q = int(queue[head])
            head += 1
            if labels[q] == noise_mark:
                labels[q] = cluster
            if labels[q] != unvisited:
                continue
            labels[q] = cluster
            if core[q]:
                queue.extend(np.nonzero(adj[q])[0])
    clusters = [np.nonzero(labels == c)[0] for c in range(next_cluster)]
    noise = np.nonzero(labels == noise_mark)[0]
    centroids = np.array([pts[c].mean(axis=0) for c in clusters]) if clusters else np.empty((0, pts.shape[1]))
    return ClusterResult(labels, clusters, noise, centroids)


def build_pyramid_grids(
    roi: Box3D,
    shapes: tuple[tuple[int, int, int], ...],
    scales: tuple[tuple[float, float, float], ...],
) -> list[np.ndarray]:
    """Grid-point coordinates for each pyramid level of one box."""
    if len(shapes) != len(scales):
        raise ValueError("shapes and scales must have the same number of levels")
    return [generate_grid_points(roi, n, rho) for n, rho in zip(shapes, scales)]


class RoIPooling:
    """Learned pooling over proposals; mode picks which routes are active."""

    def __init__(self, cfg: DetectorConfig, feat_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.feat_dim = feat_dim
        self.mode = cfg.pooling_mode
        attn = cfg.attn_dim
        self.cluster_enc = None
        self.pos_proj = None
        self.fuse = None
        fuse_in = 0
        # ReLU layers here start with a positive bias. The pooled inputs
        # share a large common component across RoIs (most grid points see
        # mostly ground), and with zero bias a handful of coordinated Adam
        # steps can push every unit dark at once, after which no gradient
        # returns. The margin keeps units alive through early training.
        if self.mode in ("cph+pph", "cph"):
            self.cluster_enc = Dense(
                3 + feat_dim, cfg.cluster_feat_dim, rng, "pool.cluster_enc",
                activation="relu", bias_init=0.3,
            )
            fuse_in += cfg.cluster_feat_dim
        if self.mode in ("cph+pph", "pph"):
            self.pos_proj = Dense(3, attn, rng, "pool.pos_proj")
            self.key_proj = Dense(feat_dim, attn, rng, "pool.key_proj")
            self.value_proj = Dense(feat_dim, attn, rng, "pool.value_proj")
            self.gate_qk = Dense(attn, 1, rng, "pool.gate_qk")
            self.gate_v = Dense(attn, 1, rng, "pool.gate_v")
            total_pts = sum(int(np.prod(s)) for s in cfg.pyramid_shapes)
            self.pyramid_proj = Dense(
                total_pts * attn, cfg.pyramid_feat_dim, rng, "pool.pyramid_proj",
                activation="relu", bias_init=0.3,
            )
            fuse_in += cfg.pyramid_feat_dim
        if self.mode == "gph":
            total_pts = int(np.prod(cfg.pyramid_shapes[0]))
            self.grid_proj = Dense(
                total_pts * feat_dim, cfg.pyramid_feat_dim, rng, "pool.grid_proj",
                activation="relu", bias_init=0.3,
            )
            fuse_in += cfg.pyramid_feat_dim
        self.fuse = Dense(fuse_in, cfg.fused_feat_dim, rng, "pool.fuse")

    def params(self) -> dict[str, Tensor]:
        groups = [self.fuse.params()]
        if self.cluster_enc is not None:
            groups.append(self.cluster_enc.params())
        if self.pos_proj is not None:
            groups.extend(
                [
                    self.pos_proj.params(),
                    self.key_proj.params(),
                    self.value_proj.params(),
                    self.gate_qk.params(),
                    self.gate_v.params(),
                    self.pyramid_proj.params(),
                ]
            )
        if self.mode == "gph":
            groups.append(self.grid_proj.params())
        return merge_params(*groups)

    # -- clustering route -------------------------------------------------------

    def cluster_features(
        self, rois: list[Box3D], kp_xyz: np.ndarray, kp_feats: Tensor
    ) -> Tensor:
        """One max-pooled cluster encoding per RoI; boxes with no cluster
        (or no keypoints at all) give a zero row."""
        cfg = self.cfg
        num_rois = len(rois)
        row_feats: list[int] = []  # keypoint index per encoder row
        row_offsets: list[np.ndarray] = []
        row_cluster: list[int] = []
        cluster_roi: list[int] = []
        num_clusters = 0
        for r, roi in enumerate(rois):
            grown = enlarge_box(roi, cfg.roi_expand)
            inside = np.nonzero(points_in_box(kp_xyz, grown))[0]
            if len(inside) == 0:
                continue
            result = dbscan(kp_xyz[inside], cfg.dbscan_eps, cfg.dbscan_min_pts)
            for members, centroid in zip(result.clusters, result.centroids):
                kp_ids = inside[members]
                for kp in kp_ids:
                    row_feats.append(int(kp))
                    row_cluster.append(num_clusters)
                row_offsets.append(kp_xyz[kp_ids] - centroid)
                cluster_roi.append(r)
                num_clusters += 1
        if num_clusters == 0:
            return T.constant(np.zeros((num_rois, cfg.cluster_feat_dim)))
        offsets = np.vstack(row_offsets)
        gathered = T.gather_rows(kp_feats, np.array(row_feats, dtype=np.int64))
        encoded = self.cluster_enc(T.concat([T.constant(offsets), gathered], axis=1))
        per_cluster = T.segment_max(encoded, np.array(row_cluster, dtype=np.int64), num_clusters)
        return T.segment_max(per_cluster, np.array(cluster_roi, dtype=np.int64), num_rois)

    # -- pyramid route ------------------------------------------------------------

    def attend_grid_points(
        self, grid_pts: np.ndarray, kp_xyz: np.ndarray, kp_feats: Tensor, radius: float
    ) -> Tensor:
        """Gated positional attention from grid points to nearby keypoints.

        The query for a (grid point, keypoint) pair embeds the offset
        keypoint - grid point; grid points with no keypoint in reach
        come out zero.
        """
        g = len(grid_pts)
        attn = self.cfg.attn_dim
        if g == 0:
            return T.constant(np.zeros((0, attn)))
        if len(kp_xyz) == 0:
            return T.constant(np.zeros((g, attn)))
        grid = HashGrid(kp_xyz, max(radius, 1e-6))
        g_ids, kp_ids = grid.query_pairs(np.asarray(grid_pts, dtype=np.float64), radius)
        if len(g_ids) == 0:
            return T.constant(np.zeros((g, attn)))
        offsets = kp_xyz[kp_ids] - np.asarray(grid_pts)[g_ids]
        q = self.pos_proj(T.constant(offsets))
        keys_all = self.key_proj(kp_feats)
        vals_all = self.value_proj(kp_feats)
        k = T.gather_rows(keys_all, kp_ids)
        v = T.gather_rows(vals_all, kp_ids)
        p = len(g_ids)
        logits = T.sum_(T.mul(q, k), axis=1)
        if self.cfg.scale_qk:
            logits = T.mul(logits, T.constant(1.0 / np.sqrt(attn)))
        sigma_qk = T.reshape(T.sigmoid(self.gate_qk(q)), (p,))
        logits = T.mul(logits, sigma_qk)
        w = segment_softmax(logits, g_ids, g)
        sigma_v = T.sigmoid(self.gate_v(v))
        vals = T.add(v, T.mul(sigma_v, q))
        weighted = T.mul(T.reshape(w, (p, 1)), vals)
        return T.segment_sum(weighted, g_ids, g)

    def pyramid_features(
        self, rois: list[Box3D], kp_xyz: np.ndarray, kp_feats: Tensor
    ) -> Tensor:
        """Flattened, projected multi-scale grid features, one row per RoI."""
        cfg = self.cfg
        num_rois = len(rois)
        attn = cfg.attn_dim
        per_level_counts = [int(np.prod(s)) for s in cfg.pyramid_shapes]
        if num_rois == 0:
            return T.constant(np.zeros((0, cfg.pyramid_feat_dim)))
        level_chunks: list[Tensor] = []
        for level, (shape, scale, radius) in enumerate(
            zip(cfg.pyramid_shapes, cfg.pyramid_scales, cfg.pyramid_radii)
        ):
            pts = np.vstack([generate_grid_points(roi, shape, scale) for roi in rois])
            attended = self.attend_grid_points(pts, kp_xyz, kp_feats, radius)
            level_chunks.append(
                T.reshape(attended, (num_rois, per_level_counts[level] * attn))
            )
        stacked = T.concat(level_chunks, axis=1)
        return self.pyramid_proj(stacked)

    # -- plain grid baseline --------------------------------------------------------

    def gph_features(self, rois: list[Box3D], kp_xyz: np.ndarray, kp_feats: Tensor) -> Tensor:
        """Baseline: average nearby keypoint features on one lattice, no
        attention, no clustering; background keypoints mix in freely."""
        cfg = self.cfg
        num_rois = len(rois)
        shape = cfg.pyramid_shapes[0]
        radius = cfg.pyramid_radii[0]
        count = int(np.prod(shape))
        if num_rois == 0:
            return T.constant(np.zeros((0, cfg.pyramid_feat_dim)))
        pts = np.vstack([generate_grid_points(roi, shape, (1.0, 1.0, 1.0)) for roi in rois])
        g = len(pts)
        if len(kp_xyz) == 0:
            pooled = T.constant(np.zeros((g, self.feat_dim)))
        else:
            grid = HashGrid(kp_xyz, max(radius, 1e-6))
            g_ids, kp_ids = grid.query_pairs(pts, radius)
            if len(g_ids) == 0:
                pooled = T.constant(np.zeros((g, self.feat_dim)))
            else:
                gathered = T.gather_rows(kp_feats, kp_ids)
                pooled = T.segment_mean(gathered, g_ids, g)
        flat = T.reshape(pooled, (num_rois, count * self.feat_dim))
        return self.grid_proj(flat)

    # -- fused output -----------------------------------------------------------------

    def __call__(self, rois: list[Box3D], kp_xyz: np.ndarray, kp_feats: Tensor) -> "RoIPoolResult":
        parts: list[Tensor] = []
        cluster_part = None
        pyramid_part = None
        if self.mode in ("cph+pph", "cph"):
            cluster_part = self.cluster_features(rois, kp_xyz, kp_feats)
            parts.append(cluster_part)
        if self.mode in ("cph+pph", "pph"):
            pyramid_part = self.pyramid_features(rois, kp_xyz, kp_feats)
            parts.append(pyramid_part)
        if self.mode == "gph":
            pyramid_part = self.gph_features(rois, kp_xyz, kp_feats)
            parts.append(pyramid_part)
        joined = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        fused = self.fuse(joined)
        return RoIPoolResult(fused, cluster_part, pyramid_part)


@dataclass
class RoIPoolResult:
    fused: Tensor  # (R, fused_feat_dim)
    cluster_part: Tensor | None
    pyramid_part: Tensor | None
