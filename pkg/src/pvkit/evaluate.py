"""Detection metrics: greedy matching and 40-point interpolated AP.

Detections are ranked by score across the whole split (stable order on
ties). Each one greedily claims the highest-overlap unmatched ground
truth of its class in its own scene; a claim below the class IoU
threshold is a false positive. Average precision interpolates the
precision envelope at the 40 recall positions 1/40 .. 40/40.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DetectorConfig
from .geometry import Box3D, iou_3d_fast
from .kitti_io import Detection


@dataclass
class ClassEval:
    """Per-class outcome; ``ap`` is None when the split has no ground truth."""

    ap: float | None
    num_gt: int
    num_det: int
    num_tp: int
    precision: np.ndarray  # along the ranked detection list
    recall: np.ndarray


@dataclass
class EvalReport:
    classes: dict[str, ClassEval]
    mean_ap: float | None

    def table(self) -> str:
        lines = [f"{'class':<12} {'AP@R40':>8} {'gt':>5} {'det':>5} {'tp':>5}"]
        for name, ev in self.classes.items():
            ap = "   n/a" if ev.ap is None else f"{ev.ap:6.4f}"
            lines.append(f"{name:<12} {ap:>8} {ev.num_gt:>5} {ev.num_det:>5} {ev.num_tp:>5}")
        mean = "n/a" if self.mean_ap is None else f"{self.mean_ap:.4f}"
        lines.append(f"{'mean':<12} {mean:>8}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["class,ap_r40,num_gt,num_det,num_tp"]
        for name, ev in self.classes.items():
            ap = "" if ev.ap is None else f"{ev.ap:.6f}"
            rows.append(f"{name},{ap},{ev.num_gt},{ev.num_det},{ev.num_tp}")
        return "\n".join(rows) + "\n"


def ap_r40(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean interpolated precision over recall levels 1/40 .. 40/40."""
    if len(recall) == 0:
        return 0.0
    total = 0.0
    for i in range(1, 41):
        r = i / 40.0
        reachable = recall >= r - 1e-12
        total += float(precision[reachable].max()) if reachable.any() else 0.0
    return total / 40.0


def evaluate_class(
    detections: list[tuple[int, float, Box3D]],
    gts_by_scene: dict[int, list[Box3D]],
    iou_threshold: float,
) -> ClassEval:
    """Match one class's detections (scene id, score, box) to ground truth."""
    num_gt = sum(len(v) for v in gts_by_scene.values())
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    matched = {sid: np.zeros(len(boxes), dtype=bool) for sid, boxes in gts_by_scene.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        sid, _, box = detections[i]
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts_by_scene.get(sid, [])):
            if matched[sid][j]:
                continue
            overlap = iou_3d_fast(box, gt)
            if overlap > best:
                best, best_j = overlap, j
        if best_j >= 0 and best >= iou_threshold:
            tp[rank] = 1.0
            matched[sid][best_j] = True
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(order) + 1)
    precision = cum_tp / ranks if len(order) else np.empty(0)
    recall = cum_tp / num_gt if num_gt and len(order) else np.zeros(len(order))
    ap = ap_r40(precision, recall) if num_gt else None
    return ClassEval(ap, num_gt, len(detections), int(cum_tp[-1]) if len(order) else 0,
                     precision, recall)


def evaluate_detections(
    per_scene_dets: list[list[Detection]],
    per_scene_gts: list[tuple[list[str], list[Box3D]]],
    cfg: DetectorConfig,
) -> EvalReport:
    """Score a whole split; scene i's detections face scene i's labels."""
    if len(per_scene_dets) != len(per_scene_gts):
        raise ValueError("detection and ground-truth scene counts differ")
    classes: dict[str, ClassEval] = {}
    aps: list[float] = []
    for cls, name in enumerate(cfg.class_names):
        dets = [
            (sid, det.score, det.box)
            for sid, scene_dets in enumerate(per_scene_dets)
            for det in scene_dets
            if det.label == name
        ]
        gts = {
            sid: [box for label, box in zip(labels, boxes) if label == name]
            for sid, (labels, boxes) in enumerate(per_scene_gts)
        }
        gts = {sid: boxes for sid, boxes in gts.items() if boxes}
        ev = evaluate_class(dets, gts, cfg.eval_iou[cls])
        classes[name] = ev
        if ev.ap is not None:
            aps.append(ev.ap)
    mean = float(np.mean(aps)) if aps else None
    return EvalReport(classes, mean)
