"""Single-process training loop for the detector.

Each step draws one scene (with replacement), runs the full forward
pass, and descends the combined objective

    rpn_cls + beta * (rpn_reg + rpn_ori) + ref_cls + ref_reg_weight * ref_reg

with Adam under a cosine learning-rate schedule. During training the
proposal list is padded with lightly jittered ground-truth boxes so the
refinement stage always sees well-overlapping examples; evaluation
never does this.

``initial_loss`` is the total from the first step, evaluated before any
update has landed. ``final_loss`` is the mean over the last ``window``
recorded steps; a single-step read would inherit the variance of
whichever scene happened to come up last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import DetectorConfig
from .geometry import Box3D
from .losses import (
    AnchorTargets,
    assign_anchor_targets,
    assign_roi_targets,
    focal_loss,
    orientation_loss,
    refinement_cls_loss,
    rpn_loss,
    smooth_l1,
)
from .model import Detector
from .optim import AdamState, adam_step, clip_grad_norm, cosine_lr, fill_missing_grads, zero_grads
from .synthetic import Scene

CURVE_FIELDS = ("step", "lr", "rpn_cls", "rpn_reg", "rpn_ori", "ref_cls", "ref_reg", "total")


@dataclass
class TrainResult:
    curve: list[dict[str, float]]
    initial_loss: float
    final_loss: float
    steps: int
    window: int


def jitter_boxes(
    boxes: list[Box3D], rng: np.random.Generator, sigma_xyz: float, sigma_yaw: float
) -> list[Box3D]:
    """Copies of ``boxes`` with small gaussian center/heading noise."""
    out = []
    for b in boxes:
        dx, dy, dz = rng.normal(0.0, sigma_xyz, 3)
        dt = rng.normal(0.0, sigma_yaw)
        out.append(Box3D(b.x + dx, b.y + dy, b.z + dz, b.h, b.w, b.l, b.theta + dt))
    return out


def curve_to_csv(curve: list[dict[str, float]]) -> str:
    rows = [",".join(CURVE_FIELDS)]
    for row in curve:
        rows.append(",".join(
            str(int(row[f])) if f == "step" else f"{row[f]:.6f}" for f in CURVE_FIELDS
        ))
    return "\n".join(rows) + "\n"


def train_detector(
    model: Detector,
    scenes: list[Scene],
    steps: int | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Optimise ``model`` in place on ``scenes``; returns the loss curve."""
    cfg = model.cfg
    if not scenes:
        raise ValueError("need at least one training scene")
    if steps is None:
        steps = cfg.train_steps if cfg.train_steps > 0 else cfg.epochs * len(scenes)
    if steps < 1:
        raise ValueError("need at least one training step")
    rng = np.random.default_rng([cfg.seed, 7])
    params = model.params()
    state = AdamState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    # The RoI pooling stack tolerates far less step noise than the dense
    # BEV path before its ReLU units latch shut, hence the separate rate.
    lr_scales = None
    if cfg.pool_lr_scale != 1.0:
        lr_scales = {"pool.": cfg.pool_lr_scale, "refine.": cfg.pool_lr_scale}
    gt_classes = [
        np.array([cfg.class_names.index(l) for l in s.labels], dtype=np.int64) for s in scenes
    ]
    anchor_targets: list[AnchorTargets | None] = [None] * len(scenes)
    curve: list[dict[str, float]] = []
    for step in range(steps):
        si = int(rng.integers(len(scenes)))
        scene = scenes[si]
        fwd = model.forward(scene.points)
        if fwd is None:
            continue
        if anchor_targets[si] is None:
            anchor_targets[si] = assign_anchor_targets(
                model.anchors, model.anchor_classes, scene.boxes, gt_classes[si],
                cfg.iou_pos, cfg.iou_neg,
            )
        at = anchor_targets[si]

        probs = T.sigmoid(fwd.rpn.logits)
        cls_loss = focal_loss(probs, at.labels, cfg.focal_alpha, cfg.focal_gamma, cfg.prob_clamp)
        if len(at.pos_indices):
            reg_loss = smooth_l1(T.gather_rows(fwd.rpn.residuals, at.pos_indices), at.residuals)
            ori_loss = orientation_loss(
                T.gather_rows(fwd.rpn.ori_logits, at.pos_indices), at.ori_bins
            )
        else:
            reg_loss = T.constant(0.0)
            ori_loss = T.constant(0.0)
        rpn_total = rpn_loss(cls_loss, reg_loss, ori_loss, cfg.loss_beta)

        props = model.propose(fwd.rpn, cfg.proposals_train)
        rois = list(props.boxes)
        roi_classes = list(props.classes)
        if cfg.train_append_gt and scene.boxes:
            rois.extend(jitter_boxes(scene.boxes, rng, cfg.gt_jitter_xyz, cfg.gt_jitter_yaw))
            roi_classes.extend(int(c) for c in gt_classes[si])
        rt = assign_roi_targets(
            rois, np.array(roi_classes, dtype=np.int64), scene.boxes, gt_classes[si],
            cfg.sigma_bg, cfg.sigma_fg, cfg.roi_reg_min_iou,
        )
        ref = model.refine(rois, fwd.encoded.keypoint_xyz, fwd.fused.fused)
        ref_cls = refinement_cls_loss(T.sigmoid(ref.conf_logits), rt.soft, cfg.prob_clamp)
        reg_rows = np.nonzero(rt.reg_mask)[0]
        if len(reg_rows):
            ref_reg = smooth_l1(T.gather_rows(ref.residuals, reg_rows), rt.residuals[reg_rows])
        else:
            ref_reg = T.constant(0.0)

        total = T.add(rpn_total, T.add(ref_cls, T.mul(T.constant(cfg.ref_reg_weight), ref_reg)))
        pieces = {
            "rpn_cls": float(cls_loss.data), "rpn_reg": float(reg_loss.data),
            "rpn_ori": float(ori_loss.data), "ref_cls": float(ref_cls.data),
            "ref_reg": float(ref_reg.data), "total": float(total.data),
        }
        if not np.isfinite(pieces["total"]):
            detail = " ".join(f"{k}={v:.4g}" for k, v in pieces.items())
            raise RuntimeError(f"non-finite loss at step {step}: {detail}")

        zero_grads(params)
        total.backward()
        fill_missing_grads(params)
        if cfg.grad_clip > 0:
            clip_grad_norm(params, cfg.grad_clip)
        lr = cosine_lr(step, steps, cfg.base_lr)
        adam_step(params, state, lr=lr, lr_scales=lr_scales)

        curve.append({"step": float(step), "lr": lr, **pieces})
        if log_every and (step % log_every == 0 or step == steps - 1):
            print(
                f"step {step:5d}  lr {lr:.5f}  total {pieces['total']:.4f}  "
                f"rpn_cls {pieces['rpn_cls']:.4f}  ref_cls {pieces['ref_cls']:.4f}",
                flush=True,
            )
    if not curve:
        raise RuntimeError("every step was skipped; no scene produced keypoints")
    window = max(1, min(50, len(curve) // 10))
    initial = float(curve[0]["total"])
    final = float(np.mean([row["total"] for row in curve[-window:]]))
    return TrainResult(curve, initial, final, steps, window)
