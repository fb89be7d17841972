"""Training losses and target assignment for both detector stages.

Stage one scores every anchor with a focal loss, regresses matched
anchors with a smooth-L1 penalty on normalised box residuals, and
classifies a two-bin heading direction; the three combine as
``cls + beta * (reg + ori)``. Stage two turns each proposal's best
ground-truth overlap into a soft confidence target by linearly
rescaling the IoU between a background and a foreground threshold, and
trains the confidence head with binary cross entropy against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Box3D, encode_residual, iou_3d_fast
from .tensor import Tensor


def focal_loss(
    probs: Tensor,
    labels: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    clamp: float = 1e-7,
) -> Tensor:
    """Mean focal term over non-ignored anchors.

    ``labels`` holds 1 (object), 0 (background), -1 (ignored). For an
    anchor with predicted object probability mu the focused probability
    is mu when positive and 1 - mu when negative; the loss is
    ``-alpha * (1 - p)**gamma * log(p)`` with p clamped away from 0 and 1.
    """
    labels = np.asarray(labels)
    if probs.ndim != 1 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} must be (N,)")
    keep = np.nonzero(labels >= 0)[0]
    if len(keep) == 0:
        return T.constant(0.0)
    mu = T.gather_rows(probs, keep)
    pos = T.constant((labels[keep] == 1).astype(np.float64))
    one = T.constant(np.ones(len(keep)))
    p_t = T.add(T.mul(pos, mu), T.mul(T.sub(one, pos), T.sub(one, mu)))
    p_t = T.clip(p_t, clamp, 1.0 - clamp)
    focus = T.power(T.sub(one, p_t), gamma)
    losses = T.mul(T.constant(-alpha), T.mul(focus, T.log(p_t)))
    return T.mean(losses)


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of the coordinate-summed smooth-L1 distance.

    Per coordinate: 0.5 d^2 when |d| < 1, |d| - 0.5 otherwise. An empty
    prediction contributes zero.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        return T.constant(0.0)
    d = T.sub(pred, T.constant(target))
    a = T.absolute(d)
    quad_mask = (a.data < 1.0).astype(np.float64)
    quad = T.mul(T.constant(0.5), T.mul(d, d))
    lin = T.sub(a, T.constant(0.5))
    per_coord = T.add(
        T.mul(T.constant(quad_mask), quad),
        T.mul(T.constant(1.0 - quad_mask), lin),
    )
    if pred.ndim == 1:
        return T.mean(per_coord)
    return T.mean(T.sum_(per_coord, axis=1))


def orientation_loss(logits: Tensor, bins: np.ndarray) -> Tensor:
    """Mean two-bin cross entropy over matched anchors; empty gives zero."""
    bins = np.asarray(bins, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"expected (N, 2) orientation logits, got {logits.shape}")
    if logits.shape[0] != bins.shape[0]:
        raise ValueError(f"{logits.shape[0]} logits but {bins.shape[0]} bins")
    n = logits.shape[0]
    if n == 0:
        return T.constant(0.0)
    peak = T.max_reduce(logits, axis=1, keepdims=True)
    z = T.sub(logits, peak)
    lse = T.log(T.sum_(T.exp(z), axis=1, keepdims=True))
    logp = T.sub(z, lse)
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), bins] = 1.0
    picked = T.sum_(T.mul(logp, T.constant(onehot)), axis=1)
    return T.mul(T.constant(-1.0), T.mean(picked))


def rpn_loss(cls_loss: Tensor, reg_loss: Tensor, ori_loss: Tensor, beta: float = 2.0) -> Tensor:
    """Stage-one total: classification plus beta-weighted regression terms."""
    return T.add(cls_loss, T.mul(T.constant(beta), T.add(reg_loss, ori_loss)))


def soft_label(iou, sigma_bg: float = 0.25, sigma_fg: float = 0.75):
    """Linear IoU-to-confidence target, clamped to [0, 1]."""
    if not sigma_bg < sigma_fg:
        raise ValueError(f"need sigma_bg < sigma_fg, got {sigma_bg}, {sigma_fg}")
    arr = np.asarray(iou, dtype=np.float64)
    out = np.clip((arr - sigma_bg) / (sigma_fg - sigma_bg), 0.0, 1.0)
    return float(out) if np.isscalar(iou) else out


def refinement_cls_loss(pred: Tensor, targets: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross entropy of confidences against soft targets."""
    targets = np.asarray(targets, dtype=np.float64)
    if pred.ndim != 1 or pred.shape[0] != targets.shape[0]:
        raise ValueError(f"pred {pred.shape} and targets {targets.shape} must be (N,)")
    if pred.shape[0] == 0:
        return T.constant(0.0)
    y = T.constant(targets)
    one = T.constant(np.ones(pred.shape[0]))
    p = T.clip(pred, clamp, 1.0 - clamp)
    losses = T.add(
        T.mul(y, T.log(p)),
        T.mul(T.sub(one, y), T.log(T.sub(one, p))),
    )
    return T.mul(T.constant(-1.0), T.mean(losses))


# -- target assignment ------------------------------------------------------------


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (A,) int8: 1 object, 0 background, -1 ignored
    matched_gt: np.ndarray  # (A,) int, -1 when unmatched
    max_iou: np.ndarray  # (A,)
    pos_indices: np.ndarray  # ascending anchor indices with label 1
    residuals: np.ndarray  # (P, 7) per positive
    ori_bins: np.ndarray  # (P,) 0 faces the anchor heading, 1 opposes it


@dataclass
class RoITargets:
    iou: np.ndarray  # (R,) best class-matched overlap
    soft: np.ndarray  # (R,) soft confidence targets
    matched_gt: np.ndarray  # (R,) int, -1 when no overlap
    residuals: np.ndarray  # (R, 7), zero rows where unmatched
    reg_mask: np.ndarray  # (R,) bool, True where regression is trained


def _candidate_mask(boxes: np.ndarray, gt: Box3D) -> np.ndarray:
    """Cheap reject: anchors whose footprint circle cannot touch the gt's."""
    reach = 0.5 * np.hypot(boxes[:, 5], boxes[:, 4]) + 0.5 * np.hypot(gt.l, gt.w)
    near = (np.abs(boxes[:, 0] - gt.x) <= reach) & (np.abs(boxes[:, 1] - gt.y) <= reach)
    return near & (np.abs(boxes[:, 2] - gt.z) <= (boxes[:, 3] + gt.h) / 2.0)


def _orientation_bin(gt_theta: float, anchor_theta: float) -> int:
    return 0 if np.cos(gt_theta - anchor_theta) >= 0.0 else 1


def assign_anchor_targets(
    anchors: list[Box3D],
    anchor_classes: np.ndarray,
    gts: list[Box3D],
    gt_classes: np.ndarray,
    iou_pos: float = 0.7,
    iou_neg: float = 0.25,
) -> AnchorTargets:
    """Label every anchor against same-class ground truth.

    Overlap at or above ``iou_pos`` is positive, below ``iou_neg``
    negative, the band between is ignored. Every ground truth also
    forces its single best-overlap anchor positive (lowest index wins
    ties) so coarse anchor grids still train.
    """
    num_anchors = len(anchors)
    anchor_classes = np.asarray(anchor_classes, dtype=np.int64)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    arr = np.array([a.to_array() for a in anchors]) if num_anchors else np.empty((0, 7))
    max_iou = np.zeros(num_anchors)
    matched = np.full(num_anchors, -1, dtype=np.int64)
    forced = np.zeros(num_anchors, dtype=bool)
    for j, gt in enumerate(gts):
        same = anchor_classes == gt_classes[j]
        cand = np.nonzero(same & _candidate_mask(arr, gt))[0]
        best_iou, best_idx = 0.0, -1
        for idx in cand:
            overlap = iou_3d_fast(anchors[idx], gt)
            if overlap > max_iou[idx]:
                max_iou[idx] = overlap
                matched[idx] = j
            if overlap > best_iou:
                best_iou, best_idx = overlap, int(idx)
        if best_idx < 0:
            # no overlapping anchor at all: fall back to the nearest
            # same-class anchor so the gt still gets a positive
            same_idx = np.nonzero(same)[0]
            if len(same_idx) == 0:
                continue
            d2 = (arr[same_idx, 0] - gt.x) ** 2 + (arr[same_idx, 1] - gt.y) ** 2
            best_idx = int(same_idx[np.argmin(d2)])
        forced[best_idx] = True
        if max_iou[best_idx] < iou_pos:
            matched[best_idx] = j
    labels = np.zeros(num_anchors, dtype=np.int8)
    labels[max_iou >= iou_pos] = 1
    labels[(max_iou >= iou_neg) & (max_iou < iou_pos)] = -1
    labels[forced] = 1
    pos = np.nonzero(labels == 1)[0]
    residuals = np.zeros((len(pos), 7))
    bins = np.zeros(len(pos), dtype=np.int64)
    for row, idx in enumerate(pos):
        gt = gts[matched[idx]]
        residuals[row] = encode_residual(gt, anchors[idx]).to_array()
        bins[row] = _orientation_bin(gt.theta, anchors[idx].theta)
    return AnchorTargets(labels, matched, max_iou, pos, residuals, bins)


def assign_roi_targets(
    rois: list[Box3D],
    roi_classes: np.ndarray,
    gts: list[Box3D],
    gt_classes: np.ndarray,
    sigma_bg: float = 0.25,
    sigma_fg: float = 0.75,
    reg_min_iou: float = 0.55,
) -> RoITargets:
    """Soft confidence targets and residuals for second-stage proposals."""
    num = len(rois)
    roi_classes = np.asarray(roi_classes, dtype=np.int64)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    iou = np.zeros(num)
    matched = np.full(num, -1, dtype=np.int64)
    for r, roi in enumerate(rois):
        for j, gt in enumerate(gts):
            if gt_classes[j] != roi_classes[r]:
                continue
            overlap = iou_3d_fast(roi, gt)
            if overlap > iou[r]:
                iou[r] = overlap
                matched[r] = j
    residuals = np.zeros((num, 7))
    for r in range(num):
        if matched[r] >= 0:
            residuals[r] = encode_residual(gts[matched[r]], rois[r]).to_array()
    soft = soft_label(iou, sigma_bg, sigma_fg)
    reg_mask = (iou >= reg_min_iou) & (matched >= 0)
    return RoITargets(iou, soft, matched, residuals, reg_mask)
