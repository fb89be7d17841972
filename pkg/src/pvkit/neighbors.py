"""Uniform hash grids for fixed-radius neighbor queries.

A coarse integer lattice buckets the points; a ball query then only
inspects the lattice cells the ball can touch. Results are index-sorted
so downstream code is order-deterministic.
"""

from __future__ import annotations

import numpy as np


class HashGrid:
    """Bucketed points supporting closed-ball queries in 2-D or 3-D.

    Buckets are kept as one point-index array sorted by packed cell key
    plus per-bucket offsets, so a batch of queries never leaves numpy.
    """

    def __init__(self, points: np.ndarray, cell: float):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ValueError(f"expected (N, 2) or (N, 3) points, got {pts.shape}")
        if not cell > 0:
            raise ValueError(f"cell size must be positive, got {cell}")
        self.points = pts
        self.cell = float(cell)
        self.dim = pts.shape[1]
        if len(pts):
            cells = np.floor(pts / self.cell).astype(np.int64)
            self._origin = cells.min(axis=0)
            shifted = cells - self._origin
            self._extent = shifted.max(axis=0) + 1
            packed = self._pack(shifted)
            self._order = np.argsort(packed, kind="stable")
            sorted_keys = packed[self._order]
            starts = np.concatenate(([0], np.nonzero(np.diff(sorted_keys))[0] + 1))
            self._keys = sorted_keys[starts]
            self._starts = starts
            self._counts = np.diff(np.append(starts, len(pts)))
        else:
            self._origin = np.zeros(self.dim, dtype=np.int64)
            self._extent = np.ones(self.dim, dtype=np.int64)
            self._order = np.empty(0, dtype=np.int64)
            self._keys = np.empty(0, dtype=np.int64)
            self._starts = np.empty(0, dtype=np.int64)
            self._counts = np.empty(0, dtype=np.int64)

    def _pack(self, shifted: np.ndarray) -> np.ndarray:
        """Collapse per-axis cell coordinates into one sortable key."""
        key = shifted[..., 0]
        for d in range(1, self.dim):
            key = key * self._extent[d] + shifted[..., d]
        return key

    def query_ball(self, center, radius: float) -> np.ndarray:
        """Indices of points with ``|p - center| <= radius``, ascending."""
        center = np.asarray(center, dtype=np.float64)
        if center.shape != (self.dim,):
            raise ValueError(f"center shape {center.shape} does not match dim {self.dim}")
        _, pid = self.query_pairs(center[None, :], radius)
        return pid

    def query_pairs(self, centers: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (center index, point index) pairs for many ball queries.

        Pairs come back sorted by center index, then point index.
        """
        centers = np.asarray(centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != self.dim:
            raise ValueError(f"expected (M, {self.dim}) centers, got {centers.shape}")
        empty = np.empty(0, dtype=np.int64)
        if not len(self.points) or not len(centers):
            return empty, empty
        reach = int(np.ceil(radius / self.cell))
        span = np.arange(-reach, reach + 1)
        grids = np.meshgrid(*([span] * self.dim), indexing="ij")
        offsets = np.stack([g.ravel() for g in grids], axis=1)
        ccells = np.floor(centers / self.cell).astype(np.int64) - self._origin
        probe = ccells[:, None, :] + offsets[None, :, :]
        valid = np.all((probe >= 0) & (probe < self._extent), axis=2)
        cent, off = np.nonzero(valid)
        if not len(cent):
            return empty, empty
        keys = self._pack(probe[cent, off])
        pos = np.searchsorted(self._keys, keys)
        pos_safe = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos_safe] == keys
        cent = cent[hit]
        starts = self._starts[pos_safe[hit]]
        counts = self._counts[pos_safe[hit]]
        total = int(counts.sum())
        if not total:
            return empty, empty
        ends = np.cumsum(counts)
        within = np.arange(total) - np.repeat(ends - counts, counts)
        cand_pt = self._order[np.repeat(starts, counts) + within]
        cand_ct = np.repeat(cent, counts)
        delta = self.points[cand_pt] - centers[cand_ct]
        keep = (delta * delta).sum(axis=1) <= radius * radius + 1e-12
        cid = cand_ct[keep]
        pid = cand_pt[keep]
        order = np.lexsort((pid, cid))
        return cid[order], pid[order]
