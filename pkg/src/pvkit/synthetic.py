"""Procedural LiDAR-style scenes for training and evaluation.

Each scene is a ground plane sampled on a jittered grid, one to a few
boxed objects whose five visible faces (four sides and the top) carry a
regular point lattice, and a sprinkle of free-space clutter kept clear
of every box. Object placement rejects overlaps with a clearance test
on circumscribed discs.

Scenes are deterministic functions of (seed, split, index): all
randomness flows from one ``np.random.default_rng([seed, split, index])``
stream. Point coordinates are rounded to two decimals and passed
through float32, and box parameters are rounded to two decimals, so a
scene written to disk and read back compares equal to the in-memory
one.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DetectorConfig
from .geometry import Box3D, enlarge_box, points_in_box
from .kitti_io import read_labels, read_points_bin, write_labels, write_points_bin

TRAIN_SPLIT = 0
EVAL_SPLIT = 1


@dataclass
class Scene:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    boxes: list[Box3D]
    labels: list[str]

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels must pair up")


def _scene_rng(cfg: DetectorConfig, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, split, index])


def _footprint_radius(w: float, l: float) -> float:
    return 0.5 * float(np.hypot(w, l))


def _place_objects(cfg: DetectorConfig, rng: np.random.Generator) -> tuple[list[Box3D], list[str]]:
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    weights = np.array(cfg.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    lo = np.array([cfg.x_min + cfg.object_margin, cfg.y_min + cfg.object_margin])
    hi = np.array([cfg.x_max - cfg.object_margin, cfg.y_max - cfg.object_margin])
    if np.any(hi <= lo):
        raise ValueError("object_margin leaves no room to place objects")
    boxes: list[Box3D] = []
    labels: list[str] = []
    radii: list[float] = []
    for _ in range(n_obj):
        cls = int(rng.choice(len(weights), p=weights))
        for _attempt in range(40):
            jit = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=3)
            h = cfg.anchor_h[cls] * jit[0]
            w = cfg.anchor_w[cls] * jit[1]
            l = cfg.anchor_l[cls] * jit[2]
            cx, cy = rng.uniform(lo, hi)
            yaw = rng.uniform(cfg.yaw_min, cfg.yaw_max)
            r = _footprint_radius(w, l)
            clear = all(
                np.hypot(cx - b.x, cy - b.y) >= r + radii[i] + cfg.min_gap
                for i, b in enumerate(boxes)
            )
            if clear:
                box = Box3D(
                    round(cx, 2), round(cy, 2), round(h / 2.0, 2),
                    round(h, 2), round(w, 2), round(l, 2), round(yaw, 2),
                )
                boxes.append(box)
                labels.append(cfg.class_names[cls])
                radii.append(r)
                break
    return boxes, labels


def _ground_points(cfg: DetectorConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.ground_spacing
    xs = np.arange(cfg.x_min + s / 2.0, cfg.x_max, s)
    ys = np.arange(cfg.y_min + s / 2.0, cfg.y_max, s)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    n = gx.size
    x = gx.ravel() + rng.uniform(-s / 4.0, s / 4.0, n)
    y = gy.ravel() + rng.uniform(-s / 4.0, s / 4.0, n)
    z = rng.normal(0.0, cfg.ground_noise, n)
    intensity = rng.uniform(0.1, 0.3, n)
    return np.column_stack([x, y, z, intensity])


def _surface_lattice(box: Box3D, spacing: float) -> np.ndarray:
    """Points on the four side faces and the top, inset so every point
    sits strictly inside the box."""
    inset = 0.96
    hw, hl, hh = 0.5 * box.w * inset, 0.5 * box.l * inset, 0.5 * box.h * inset
    n_l = max(2, int(np.ceil(2 * hl / spacing)) + 1)
    n_w = max(2, int(np.ceil(2 * hw / spacing)) + 1)
    n_h = max(2, int(np.ceil(2 * hh / spacing)) + 1)
    along_l = np.linspace(-hl, hl, n_l)
    along_w = np.linspace(-hw, hw, n_w)
    along_h = np.linspace(-hh, hh, n_h)
    faces = []
    for sign in (-1.0, 1.0):
        u, v = np.meshgrid(along_l, along_h, indexing="ij")
        faces.append(np.column_stack([u.ravel(), np.full(u.size, sign * hw), v.ravel()]))
        u, v = np.meshgrid(along_w, along_h, indexing="ij")
        faces.append(np.column_stack([np.full(u.size, sign * hl), u.ravel(), v.ravel()]))
    u, v = np.meshgrid(along_l, along_w, indexing="ij")
    faces.append(np.column_stack([u.ravel(), v.ravel(), np.full(u.size, hh)]))
    local = np.vstack(faces)
    c, s = np.cos(box.theta), np.sin(box.theta)
    world = np.empty_like(local)
    world[:, 0] = box.x + local[:, 0] * c - local[:, 1] * s
    world[:, 1] = box.y + local[:, 0] * s + local[:, 1] * c
    world[:, 2] = box.z + local[:, 2]
    return world


def _object_points(box: Box3D, cfg: DetectorConfig, rng: np.random.Generator) -> np.ndarray:
    spacing = cfg.surface_spacing
    pts = _surface_lattice(box, spacing)
    while len(pts) < cfg.min_object_points:
        spacing *= 0.8
        pts = _surface_lattice(box, spacing)
    pts = pts + rng.normal(0.0, 0.005, pts.shape)
    intensity = rng.uniform(0.5, 0.9, len(pts))
    return np.column_stack([pts, intensity])


def _clutter_points(
    cfg: DetectorConfig, boxes: list[Box3D], rng: np.random.Generator
) -> np.ndarray:
    keep_out = [enlarge_box(b, 0.3) for b in boxes]
    rows = []
    z_hi = min(cfg.z_max - 0.1, 2.5)
    while len(rows) < cfg.clutter_points:
        x = rng.uniform(cfg.x_min, cfg.x_max)
        y = rng.uniform(cfg.y_min, cfg.y_max)
        z = rng.uniform(0.05, z_hi)
        p = np.array([x, y, z])
        if any(points_in_box(p[None, :], b)[0] for b in keep_out):
            continue
        rows.append([x, y, z, rng.uniform(0.2, 0.8)])
    return np.array(rows) if rows else np.empty((0, 4))


def generate_scene(cfg: DetectorConfig, index: int, split: int = TRAIN_SPLIT) -> Scene:
    """Build one deterministic scene for (cfg.seed, split, index)."""
    rng = _scene_rng(cfg, split, index)
    boxes, labels = _place_objects(cfg, rng)
    parts = [_ground_points(cfg, rng)]
    for box in boxes:
        parts.append(_object_points(box, cfg, rng))
    parts.append(_clutter_points(cfg, boxes, rng))
    pts = np.vstack([p for p in parts if len(p)])
    in_range = (
        (pts[:, 0] >= cfg.x_min) & (pts[:, 0] < cfg.x_max)
        & (pts[:, 1] >= cfg.y_min) & (pts[:, 1] < cfg.y_max)
        & (pts[:, 2] >= cfg.z_min) & (pts[:, 2] < cfg.z_max)
    )
    pts = pts[in_range]
    pts = pts[rng.permutation(len(pts))]
    pts = np.round(pts, 2).astype(np.float32).astype(np.float64)
    return Scene(pts, boxes, labels)


def scene_paths(root, split_name: str, index: int) -> tuple[Path, Path]:
    base = Path(root) / split_name
    return base / "velodyne" / f"{index:06d}.bin", base / "label_2" / f"{index:06d}.txt"


def write_scene(root, split_name: str, index: int, scene: Scene) -> None:
    cloud_path, label_path = scene_paths(root, split_name, index)
    cloud_path.parent.mkdir(parents=True, exist_ok=True)
    label_path.parent.mkdir(parents=True, exist_ok=True)
    write_points_bin(cloud_path, scene.points)
    write_labels(label_path, list(zip(scene.labels, scene.boxes)))


def load_scene(root, split_name: str, index: int) -> Scene:
    cloud_path, label_path = scene_paths(root, split_name, index)
    points = read_points_bin(cloud_path)
    items = read_labels(label_path)
    return Scene(points, [box for _, box in items], [name for name, _ in items])


def list_scene_indices(root, split_name: str) -> list[int]:
    cloud_dir = Path(root) / split_name / "velodyne"
    if not cloud_dir.is_dir():
        return []
    return sorted(int(p.stem) for p in cloud_dir.glob("*.bin"))


def _gen_job(args) -> int:
    cfg, root, split_name, split, index = args
    write_scene(root, split_name, index, generate_scene(cfg, index, split))
    return index


def generate_dataset(
    cfg: DetectorConfig,
    root,
    split_name: str,
    count: int,
    split: int,
    workers: int = 1,
) -> list[int]:
    """Write ``count`` scenes under root/split_name; returns the indices.

    With ``workers > 1`` scenes are built in a process pool; the result
    is identical to the sequential run because every scene depends only
    on its own index.
    """
    jobs = [(cfg, root, split_name, split, i) for i in range(count)]
    if workers > 1 and count > 1:
        with multiprocessing.Pool(processes=min(workers, count)) as pool:
            return list(pool.imap(_gen_job, jobs, chunksize=4))
    return [_gen_job(j) for j in jobs]
