"""A small point-voxel 3D detector built on a from-scratch autodiff tape.

Everything runs on numpy float64: the tensor engine, the attention
fusion of point and voxel/BEV tokens, density-clustering and grid
pyramid pooling, both detection stages, and the toy synthetic pipeline
that trains and evaluates the whole thing in CPU minutes.
"""

import os as _os

# Cap BLAS threads before numpy loads so PVKIT_THREADS pins everything.
_threads = _os.environ.get("PVKIT_THREADS")
if _threads and _threads.isdigit():
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .config import ANCHOR_YAWS, DetectorConfig, load_config, parse_config, save_config
from .evaluate import EvalReport, evaluate_detections
from .geometry import (
    Box3D,
    BoxResidual,
    decode_residual,
    encode_residual,
    iou_3d,
    iou_bev,
    nms_bev,
    wrap_angle,
)
from .kitti_io import Detection, read_labels, read_points_bin, write_labels, write_points_bin
from .model import Detector, build_anchors
from .pooling import dbscan
from .scene import fps_sample, voxelize
from .synthetic import Scene, generate_dataset, generate_scene, load_scene
from .tensor import Tensor, finite_diff_check
from .train import TrainResult, train_detector

__version__ = "0.1.0"

__all__ = [
    "ANCHOR_YAWS",
    "Box3D",
    "BoxResidual",
    "Detection",
    "Detector",
    "DetectorConfig",
    "EvalReport",
    "Scene",
    "Tensor",
    "TrainResult",
    "build_anchors",
    "dbscan",
    "decode_residual",
    "encode_residual",
    "evaluate_detections",
    "finite_diff_check",
    "fps_sample",
    "generate_dataset",
    "generate_scene",
    "iou_3d",
    "iou_bev",
    "load_config",
    "load_scene",
    "nms_bev",
    "parse_config",
    "read_labels",
    "read_points_bin",
    "save_config",
    "train_detector",
    "voxelize",
    "wrap_angle",
    "write_labels",
    "write_points_bin",
]
