"""Detector configuration: one flat dataclass, one flat key=value file format.

``DetectorConfig()`` carries the full-scale defaults (70 m range, 5 cm
voxels, 2048 keypoints). ``DetectorConfig.toy()`` is the desk-scale
profile the synthetic pipeline and the bundled experiments run on; it
shrinks the scene, the feature widths, and the proposal budget so a
full train/eval cycle fits in CPU minutes.

Config files hold one ``key = value`` pair per line, ``#`` comments,
and reject unknown keys. Tuples are comma-separated; the per-level
pyramid fields separate levels with ``;``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass


ANCHOR_YAWS = (0.0, math.pi / 2.0)


@dataclass
class DetectorConfig:
    # detection range and voxelisation
    x_min: float = 0.0
    x_max: float = 70.4
    y_min: float = -40.0
    y_max: float = 40.0
    z_min: float = -3.0
    z_max: float = 1.0
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)

    # feature widths
    point_feat_dim: int = 32
    voxel_dims: tuple[int, int, int, int] = (32, 64, 128, 128)
    bev_dim: int = 256
    attn_dim: int = 128

    # keypoints and token gathering
    num_keypoints: int = 2048
    keypoint_radius: float = 0.8
    voxel_token_radii: tuple[float, float, float, float] = (0.4, 0.8, 1.6, 3.2)

    # attention fusion
    fusion_depth: int = 2
    scale_qk: bool = True
    fusion_radius: float = math.inf

    # region-of-interest pooling
    roi_expand: float = 0.4
    dbscan_eps: float = 0.2
    dbscan_min_pts: int = 2
    cluster_feat_dim: int = 128
    pyramid_scales: tuple[tuple[float, float, float], ...] = (
        (1.0, 1.0, 1.0),
        (1.2, 1.2, 1.2),
        (1.6, 1.6, 1.6),
    )
    pyramid_shapes: tuple[tuple[int, int, int], ...] = ((6, 6, 6), (4, 4, 4), (2, 2, 2))
    pyramid_radii: tuple[float, ...] = (0.4, 0.8, 1.6)
    pyramid_feat_dim: int = 128
    fused_feat_dim: int = 256
    pooling_mode: str = "cph+pph"

    # anchors and proposals
    class_names: tuple[str, ...] = ("car", "pedestrian", "cyclist")
    anchor_h: tuple[float, ...] = (1.56, 1.73, 1.73)
    anchor_w: tuple[float, ...] = (1.6, 0.6, 0.6)
    anchor_l: tuple[float, ...] = (3.9, 0.8, 1.76)
    anchor_z: tuple[float, ...] = (0.78, 0.865, 0.865)
    iou_pos: float = 0.7
    iou_neg: float = 0.25
    rpn_nms_iou: float = 0.7
    pre_nms_top: int = 512
    proposals_train: int = 128
    proposals_eval: int = 64

    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loss_beta: float = 2.0
    ref_reg_weight: float = 2.0
    sigma_fg: float = 0.75
    sigma_bg: float = 0.25
    roi_reg_min_iou: float = 0.55
    prob_clamp: float = 1e-7

    # optimisation
    base_lr: float = 0.01
    pool_lr_scale: float = 1.0
    weight_decay: float = 0.01
    epochs: int = 80
    train_steps: int = 0
    grad_clip: float = 0.0
    train_append_gt: bool = True
    gt_jitter_xyz: float = 0.1
    gt_jitter_yaw: float = 0.05

    # final detections
    final_nms_iou: float = 0.2
    score_threshold: float = 0.1
    max_detections: int = 32

    # synthetic corpus
    train_scenes: int = 200
    eval_scenes: int = 50
    objects_min: int = 1
    objects_max: int = 3
    class_weights: tuple[float, ...] = (0.5, 0.25, 0.25)
    size_jitter: float = 0.08
    yaw_min: float = -math.pi / 4.0
    yaw_max: float = math.pi / 4.0
    ground_spacing: float = 0.35
    ground_noise: float = 0.03
    surface_spacing: float = 0.3
    min_object_points: int = 40
    clutter_points: int = 40
    object_margin: float = 2.0
    min_gap: float = 1.2

    # evaluation
    eval_iou: tuple[float, ...] = (0.7, 0.5, 0.5)

    seed: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError("detection range must have min < max on every axis")
        if min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        for name in ("point_feat_dim", "bev_dim", "attn_dim", "num_keypoints",
                     "cluster_feat_dim", "pyramid_feat_dim", "fused_feat_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if len(self.voxel_dims) != 4 or min(self.voxel_dims) < 1:
            raise ValueError(f"voxel_dims needs 4 positive widths, got {self.voxel_dims}")
        if self.fusion_depth < 1:
            raise ValueError("fusion_depth must be at least 1")
        if not (len(self.pyramid_scales) == len(self.pyramid_shapes) == len(self.pyramid_radii)):
            raise ValueError("pyramid fields must agree on the number of levels")
        for scale in self.pyramid_scales:
            if min(scale) <= 0:
                raise ValueError(f"pyramid scale must be positive, got {scale}")
        for shape in self.pyramid_shapes:
            if min(shape) < 1:
                raise ValueError(f"pyramid shape must be positive, got {shape}")
        if self.pooling_mode not in ("cph+pph", "cph", "pph", "gph"):
            raise ValueError(f"unknown pooling_mode {self.pooling_mode!r}")
        if self.dbscan_eps <= 0 or self.dbscan_min_pts < 1:
            raise ValueError("dbscan_eps must be positive and dbscan_min_pts at least 1")
        if self.roi_expand < 0:
            raise ValueError("roi_expand must be non-negative")
        n_cls = len(self.class_names)
        for name in ("anchor_h", "anchor_w", "anchor_l", "anchor_z", "class_weights", "eval_iou"):
            if len(getattr(self, name)) != n_cls:
                raise ValueError(f"{name} must list one value per class")
        if not (0 < self.iou_neg < self.iou_pos <= 1):
            raise ValueError("need 0 < iou_neg < iou_pos <= 1")
        if not (0 <= self.sigma_bg < self.sigma_fg <= 1):
            raise ValueError("need 0 <= sigma_bg < sigma_fg <= 1")
        if not (0 < self.focal_alpha <= 1) or self.focal_gamma < 0:
            raise ValueError("focal_alpha in (0, 1] and focal_gamma >= 0 required")
        if not (0 < self.prob_clamp < 0.5):
            raise ValueError("prob_clamp must lie in (0, 0.5)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1 and self.train_steps < 1:
            raise ValueError("either epochs or train_steps must be positive")
        if sum(self.class_weights) <= 0:
            raise ValueError("class_weights must sum to a positive value")

    # -- derived geometry ------------------------------------------------------

    def grid_shape(self, level: int = 0) -> tuple[int, int, int]:
        """Voxel-grid shape at a hierarchy level (each level halves, ceil)."""
        nx = max(1, math.ceil((self.x_max - self.x_min) / self.voxel_size[0] - 1e-9))
        ny = max(1, math.ceil((self.y_max - self.y_min) / self.voxel_size[1] - 1e-9))
        nz = max(1, math.ceil((self.z_max - self.z_min) / self.voxel_size[2] - 1e-9))
        for _ in range(level):
            nx = max(1, math.ceil(nx / 2))
            ny = max(1, math.ceil(ny / 2))
            nz = max(1, math.ceil(nz / 2))
        return nx, ny, nz

    @property
    def bev_shape(self) -> tuple[int, int]:
        nx, ny, _ = self.grid_shape(3)
        return nx, ny

    @property
    def bev_cell(self) -> tuple[float, float]:
        return self.voxel_size[0] * 8.0, self.voxel_size[1] * 8.0

    @property
    def vb_token_dim(self) -> int:
        """Width of a fused voxel+BEV token."""
        return sum(self.voxel_dims) + self.bev_dim

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def anchors_per_cell(self) -> int:
        return self.num_classes * len(ANCHOR_YAWS)

    # -- profiles ----------------------------------------------------------------

    @classmethod
    def toy(cls) -> "DetectorConfig":
        """Desk-scale profile: small scene, thin features, CPU-minute training."""
        return cls(
            x_min=0.0,
            x_max=12.8,
            y_min=-6.4,
            y_max=6.4,
            z_min=-2.0,
            z_max=2.0,
            voxel_size=(0.1, 0.1, 0.25),
            point_feat_dim=16,
            voxel_dims=(8, 12, 16, 16),
            bev_dim=48,
            attn_dim=64,
            num_keypoints=256,
            keypoint_radius=0.5,
            voxel_token_radii=(0.2, 0.4, 0.8, 1.6),
            fusion_depth=1,
            fusion_radius=1.6,
            dbscan_eps=1.0,
            cluster_feat_dim=64,
            pyramid_scales=((1.0, 1.0, 1.0), (1.2, 1.2, 1.2), (1.6, 1.6, 1.6)),
            pyramid_shapes=((3, 3, 3), (2, 2, 2), (2, 2, 2)),
            pyramid_radii=(0.5, 0.8, 1.2),
            pyramid_feat_dim=160,
            fused_feat_dim=224,
            pre_nms_top=48,
            proposals_train=12,
            proposals_eval=24,
            rpn_nms_iou=0.3,
            iou_pos=0.45,
            iou_neg=0.2,
            focal_alpha=0.75,
            ref_reg_weight=2.0,
            sigma_fg=0.55,
            sigma_bg=0.15,
            roi_reg_min_iou=0.25,
            gt_jitter_xyz=0.3,
            gt_jitter_yaw=0.12,
            pool_lr_scale=0.1,
            grad_clip=10.0,
            train_steps=2000,
            max_detections=8,
            score_threshold=0.01,
            eval_iou=(0.5, 0.5, 0.5),
        )

    @classmethod
    def ablation(cls) -> "DetectorConfig":
        """Toy profile shrunk further for head-to-head pooling comparisons."""
        cfg = cls.toy()
        return dataclasses.replace(cfg, train_scenes=48, eval_scenes=16, train_steps=600)


_TUPLE_OF_TUPLES = {"pyramid_scales", "pyramid_shapes"}


def _parse_scalar(text: str, kind: type):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _field_types() -> dict[str, object]:
    return {f.name: f for f in dataclasses.fields(DetectorConfig)}


def _parse_value(name: str, text: str, default):
    if name in _TUPLE_OF_TUPLES:
        inner = int if name == "pyramid_shapes" else float
        levels = [lvl.strip() for lvl in text.split(";") if lvl.strip()]
        return tuple(tuple(inner(v) for v in lvl.split(",")) for lvl in levels)
    if isinstance(default, tuple):
        element = str if all(isinstance(v, str) for v in default) else (
            int if all(isinstance(v, int) and not isinstance(v, bool) for v in default) else float
        )
        return tuple(_parse_scalar(v, element) for v in text.split(",") if v.strip())
    return _parse_scalar(text, type(default))


def _format_value(name: str, value) -> str:
    if name in _TUPLE_OF_TUPLES:
        return ";".join(",".join(repr(v) if isinstance(v, float) else str(v) for v in lvl) for lvl in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path, base: DetectorConfig | None = None) -> DetectorConfig:
    """Parse a flat key=value file; unknown keys raise KeyError."""
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    return parse_config(text, base=base)


def parse_config(text: str, base: DetectorConfig | None = None) -> DetectorConfig:
    defaults = dataclasses.asdict(base) if base is not None else {
        f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
        for f in dataclasses.fields(DetectorConfig)
    }
    if base is not None:
        # asdict deep-copies tuples into tuples already; nothing else needed
        pass
    known = {f.name for f in dataclasses.fields(DetectorConfig)}
    overrides: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise KeyError(f"line {lineno}: unknown config key {key!r}")
        overrides[key] = _parse_value(key, value, defaults[key])
    merged = {**defaults, **overrides}
    return DetectorConfig(**merged)


def save_config(cfg: DetectorConfig, path) -> None:
    lines = [
        f"{f.name} = {_format_value(f.name, getattr(cfg, f.name))}"
        for f in dataclasses.fields(DetectorConfig)
    ]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
