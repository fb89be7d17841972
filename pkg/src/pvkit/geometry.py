"""Oriented 3-D boxes and the geometry the detector is built on.

Boxes are (x, y, z, h, w, l, theta): center, vertical size h, lateral
size w, longitudinal size l, and yaw about +z. The length axis points
along the heading, width across it. Overlap of rotated footprints is
computed exactly with Sutherland-Hodgman polygon clipping followed by
the shoelace formula; 3-D IoU multiplies that footprint intersection by
the vertical overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_CLIP_EPS = 1e-9


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    out = float(np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)
    # mod can land exactly on pi for inputs a hair below the wrap point
    if out >= np.pi:
        out -= 2.0 * np.pi
    return out


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), sizes (h, w, l), yaw theta."""

    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float

    def __post_init__(self):
        for field_name in ("h", "w", "l"):
            v = getattr(self, field_name)
            if not (v > 0.0) or not np.isfinite(v):
                raise ValueError(f"box size {field_name}={v} must be positive and finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def volume(self) -> float:
        return self.h * self.w * self.l

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.theta])

    @staticmethod
    def from_array(arr) -> "Box3D":
        x, y, z, h, w, l, theta = (float(v) for v in arr)
        return Box3D(x, y, z, h, w, l, theta)


@dataclass(frozen=True)
class BoxResidual:
    """Normalised offsets between a box and its anchor."""

    dx: float
    dy: float
    dz: float
    dh: float
    dw: float
    dl: float
    dtheta: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dh, self.dw, self.dl, self.dtheta])

    @staticmethod
    def from_array(arr) -> "BoxResidual":
        return BoxResidual(*(float(v) for v in arr))


def footprint_corners(box: Box3D) -> np.ndarray:
    """The 4 corners of the box footprint in the xy plane, CCW order."""
    c, s = np.cos(box.theta), np.sin(box.theta)
    half_l, half_w = box.l / 2.0, box.w / 2.0
    local = np.array(
        [
            [half_l, half_w],
            [-half_l, half_w],
            [-half_l, -half_w],
            [half_l, -half_w],
        ]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.x, box.y])


def box_corners(box: Box3D) -> np.ndarray:
    """All 8 corners, bottom face first, each face in CCW footprint order."""
    foot = footprint_corners(box)
    bottom = np.column_stack([foot, np.full(4, box.z - box.h / 2.0)])
    top = np.column_stack([foot, np.full(4, box.z + box.h / 2.0)])
    return np.vstack([bottom, top])


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask, True where a point falls strictly inside the open box."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    rel = pts[:, :3] - np.array([box.x, box.y, box.z])
    c, s = np.cos(box.theta), np.sin(box.theta)
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    return (
        (np.abs(local_x) < box.l / 2.0)
        & (np.abs(local_y) < box.w / 2.0)
        & (np.abs(rel[:, 2]) < box.h / 2.0)
    )


def point_in_box(point, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(point, dtype=np.float64)[None, :], box)[0])


def enlarge_box(box: Box3D, margin: float) -> Box3D:
    """Grow each size by ``margin`` (center and yaw unchanged)."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    return Box3D(box.x, box.y, box.z, box.h + margin, box.w + margin, box.l + margin, box.theta)


# -- rotated overlap ---------------------------------------------------------------


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` against convex CCW ``clipper``."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if len(output) == 0:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        input_poly = output
        kept = []
        # signed distance > 0 means left of the edge, i.e. inside for CCW
        rel = input_poly - a
        dists = edge[0] * rel[:, 1] - edge[1] * rel[:, 0]
        for j in range(len(input_poly)):
            k = (j + 1) % len(input_poly)
            p, q = input_poly[j], input_poly[k]
            dp, dq = dists[j], dists[k]
            if dp >= -_CLIP_EPS:
                kept.append(p)
                if dq < -_CLIP_EPS and dp > _CLIP_EPS:
                    t = dp / (dp - dq)
                    kept.append(p + t * (q - p))
            elif dq > _CLIP_EPS:
                t = dp / (dp - dq)
                kept.append(p + t * (q - p))
        output = np.array(kept) if kept else np.empty((0, 2))
    return output


def intersection_area_bev(a: Box3D, b: Box3D) -> float:
    """Exact area of overlap of the two rotated footprints."""
    poly = _clip_polygon(footprint_corners(a), footprint_corners(b))
    return _polygon_area(poly)


def _canonical_pair(a: Box3D, b: Box3D) -> tuple[Box3D, Box3D]:
    # order the operands so iou(a, b) and iou(b, a) run the identical
    # floating-point computation
    ka, kb = tuple(a.to_array()), tuple(b.to_array())
    return (a, b) if ka <= kb else (b, a)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU of the two footprints."""
    a, b = _canonical_pair(a, b)
    inter = intersection_area_bev(a, b)
    area_a = a.l * a.w
    area_b = b.l * b.w
    union = area_a + area_b - inter
    if union <= 0.0:
        raise ValueError("degenerate zero-area footprint in iou_bev")
    return inter / union


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: footprint overlap times vertical overlap."""
    a, b = _canonical_pair(a, b)
    va, vb = a.volume(), b.volume()
    if va <= 0.0 or vb <= 0.0:
        raise ValueError("degenerate zero-volume box in iou_3d")
    dz = min(a.z + a.h / 2.0, b.z + b.h / 2.0) - max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    if dz <= 0.0:
        return 0.0
    inter = intersection_area_bev(a, b) * dz
    union = va + vb - inter
    return inter / union


def _aabb_disjoint(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * float(np.hypot(a.l, a.w))
    rb = 0.5 * float(np.hypot(b.l, b.w))
    if abs(a.x - b.x) > ra + rb or abs(a.y - b.y) > ra + rb:
        return True
    return abs(a.z - b.z) > (a.h + b.h) / 2.0


def iou_3d_fast(a: Box3D, b: Box3D) -> float:
    """iou_3d with a circumscribed-disc rejection test for distant pairs."""
    if _aabb_disjoint(a, b):
        return 0.0
    return iou_3d(a, b)


def nms_bev(boxes: list[Box3D], scores, iou_threshold: float) -> list[int]:
    """Greedy BEV non-maximum suppression.

    Boxes are visited in descending score order (ties keep the lower
    index); a box is kept unless its footprint IoU with an already-kept
    box exceeds the threshold. Returns kept indices in visit order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != scores.shape[0]:
        raise ValueError(f"{len(boxes)} boxes but {scores.shape[0]} scores")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        idx = int(idx)
        candidate = boxes[idx]
        suppressed = False
        for kept_idx in kept:
            other = boxes[kept_idx]
            if _aabb_disjoint(candidate, other):
                continue
            if iou_bev(candidate, other) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(idx)
    return kept


# -- grid points -------------------------------------------------------------------


def generate_grid_points(box: Box3D, n: tuple[int, int, int], rho: tuple[float, float, float]) -> np.ndarray:
    """Cell centers of an (n_l, n_w, n_h) lattice over the rho-scaled box.

    The lattice is centered on the box and rotated into its frame, so a
    scale of one keeps every point strictly interior. Points are ordered
    with the length index outermost and the height index innermost.
    """
    n_l, n_w, n_h = (int(v) for v in n)
    if min(n_l, n_w, n_h) < 1:
        raise ValueError(f"grid shape must be positive, got {n}")
    rho_l, rho_w, rho_h = (float(v) for v in rho)
    if min(rho_l, rho_w, rho_h) <= 0:
        raise ValueError(f"grid scale must be positive, got {rho}")
    cell = np.array([rho_l * box.l / n_l, rho_w * box.w / n_w, rho_h * box.h / n_h])
    half = np.array([rho_l * box.l, rho_w * box.w, rho_h * box.h]) / 2.0
    ii, jj, kk = np.meshgrid(np.arange(n_l), np.arange(n_w), np.arange(n_h), indexing="ij")
    steps = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()]).astype(np.float64)
    local = cell * (steps + 0.5) - half
    c, s = np.cos(box.theta), np.sin(box.theta)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.x
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.y
    world[:, 2] = local[:, 2] + box.z
    return world


# -- residual encoding -------------------------------------------------------------


def encode_residual(gt: Box3D, anchor: Box3D) -> BoxResidual:
    """Normalised offsets of ``gt`` relative to ``anchor``.

    Center offsets divide by the anchor footprint diagonal (z by the
    anchor height), sizes are log ratios, and the yaw residual is the
    direct angle difference.
    """
    diag = float(np.hypot(anchor.l, anchor.w))
    return BoxResidual(
        dx=(gt.x - anchor.x) / diag,
        dy=(gt.y - anchor.y) / diag,
        dz=(gt.z - anchor.z) / anchor.h,
        dh=float(np.log(gt.h / anchor.h)),
        dw=float(np.log(gt.w / anchor.w)),
        dl=float(np.log(gt.l / anchor.l)),
        dtheta=gt.theta - anchor.theta,
    )


def decode_residual(res: BoxResidual, anchor: Box3D) -> Box3D:
    """Inverse of ``encode_residual``; exact round trip up to angle wrap."""
    diag = float(np.hypot(anchor.l, anchor.w))
    return Box3D(
        x=anchor.x + res.dx * diag,
        y=anchor.y + res.dy * diag,
        z=anchor.z + res.dz * anchor.h,
        h=anchor.h * float(np.exp(res.dh)),
        w=anchor.w * float(np.exp(res.dw)),
        l=anchor.l * float(np.exp(res.dl)),
        theta=anchor.theta + res.dtheta,
    )


def encode_residual_array(gt_boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorised ``encode_residual`` over (N, 7) box arrays."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    an = np.asarray(anchors, dtype=np.float64)
    if gt.shape != an.shape or gt.ndim != 2 or gt.shape[1] != 7:
        raise ValueError(f"expected matching (N, 7) arrays, got {gt.shape} and {an.shape}")
    diag = np.hypot(an[:, 5], an[:, 4])
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - an[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - an[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - an[:, 2]) / an[:, 3]
    out[:, 3:6] = np.log(gt[:, 3:6] / an[:, 3:6])
    out[:, 6] = gt[:, 6] - an[:, 6]
    return out


def decode_residual_array(res: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorised ``decode_residual``; yaw wraps to [-pi, pi)."""
    rr = np.asarray(res, dtype=np.float64)
    an = np.asarray(anchors, dtype=np.float64)
    if rr.shape != an.shape or rr.ndim != 2 or rr.shape[1] != 7:
        raise ValueError(f"expected matching (N, 7) arrays, got {rr.shape} and {an.shape}")
    diag = np.hypot(an[:, 5], an[:, 4])
    out = np.empty_like(rr)
    out[:, 0] = an[:, 0] + rr[:, 0] * diag
    out[:, 1] = an[:, 1] + rr[:, 1] * diag
    out[:, 2] = an[:, 2] + rr[:, 2] * an[:, 3]
    out[:, 3:6] = an[:, 3:6] * np.exp(rr[:, 3:6])
    theta = an[:, 6] + rr[:, 6]
    out[:, 6] = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    out[out[:, 6] >= np.pi, 6] -= 2.0 * np.pi
    return out
