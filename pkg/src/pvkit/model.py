"""The two-stage detector: BEV anchor proposals, attention-pooled refinement.

Stage one runs a dense head over every bird's-eye-view cell; each cell
carries one anchor per (class, heading) pair, and each anchor predicts
an objectness logit, seven box residuals, and a two-bin heading
direction (the direction bins are a training aid only; decoding keeps
the regressed heading as-is). Stage two pools fused keypoint features
inside each surviving proposal and predicts a confidence plus residuals
relative to the proposal box itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ANCHOR_YAWS, DetectorConfig
from .fusion import FusionResult, FusionStack
from .geometry import Box3D, decode_residual_array, nms_bev
from .kitti_io import Detection
from .nn import Dense, load_checkpoint, merge_params, restore_params, save_checkpoint
from .pooling import RoIPooling, RoIPoolResult
from .scene import EncodedScene, SceneEncoder
from .tensor import Tensor

# Residuals are clamped to this magnitude before decoding a box from
# them; it only matters for wildly untrained heads, where an unbounded
# log-size residual would otherwise exponentiate into garbage.
RESIDUAL_CLAMP = 10.0


def build_anchors(cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Anchor boxes tiled over BEV cell centers.

    Row order is cell-major (x-major flattened cell, then class, then
    heading), matching the proposal head's output reshape. Returns the
    (A, 7) box array and the (A,) class index of each anchor.
    """
    h, w = cfg.bev_shape
    cx = cfg.x_min + (np.arange(h) + 0.5) * cfg.bev_cell[0]
    cy = cfg.y_min + (np.arange(w) + 0.5) * cfg.bev_cell[1]
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    k = cfg.anchors_per_cell
    n_yaw = len(ANCHOR_YAWS)
    per_cell = np.empty((k, 5))
    for cls in range(cfg.num_classes):
        for j, yaw in enumerate(ANCHOR_YAWS):
            per_cell[cls * n_yaw + j] = (
                cfg.anchor_z[cls], cfg.anchor_h[cls], cfg.anchor_w[cls],
                cfg.anchor_l[cls], yaw,
            )
    arr = np.empty((len(cells) * k, 7))
    arr[:, 0] = np.repeat(cells[:, 0], k)
    arr[:, 1] = np.repeat(cells[:, 1], k)
    arr[:, 2:7] = np.tile(per_cell, (len(cells), 1))
    classes = np.tile(np.repeat(np.arange(cfg.num_classes), n_yaw), len(cells))
    return arr, classes


@dataclass
class RpnOutput:
    """Dense stage-one predictions, one row per anchor."""

    logits: Tensor  # (A,) objectness
    residuals: Tensor  # (A, 7)
    ori_logits: Tensor  # (A, 2)


@dataclass
class ProposalSet:
    boxes: list[Box3D]
    classes: np.ndarray  # (R,) anchor class per proposal
    scores: np.ndarray  # (R,) sigmoid objectness
    anchor_ids: np.ndarray  # (R,) source anchor row, -1 for injected boxes


@dataclass
class RefineOutput:
    conf_logits: Tensor  # (R,)
    residuals: Tensor  # (R, 7), relative to the proposal box
    pooled: RoIPoolResult


@dataclass
class SceneForward:
    encoded: EncodedScene
    fused: FusionResult
    rpn: RpnOutput


class Detector:
    """Scene encoder, fusion stack, and both detection stages in one place."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.encoder = SceneEncoder(cfg, rng)
        self.fusion = FusionStack(
            cfg.point_feat_dim,
            cfg.vb_token_dim,
            cfg.attn_dim,
            cfg.fusion_depth,
            rng,
            scale=cfg.scale_qk,
            radius=cfg.fusion_radius,
        )
        self.rpn_head = Dense(cfg.bev_dim, cfg.anchors_per_cell * 10, rng, "rpn.head")
        # Start the objectness columns at a low prior. Almost every anchor
        # is background, and a head that opens at p=0.5 spends its first
        # steps shoving the whole trunk toward "predict the base rate",
        # which can settle into a constant-logit optimum the focal loss
        # never escapes. Opening near the base rate removes that pressure.
        self.rpn_head.b.data[0::10] = -2.0
        self.roi_pool = RoIPooling(cfg, cfg.attn_dim, rng)
        self.refine_out = Dense(cfg.fused_feat_dim, 8, rng, "refine.out")
        self.anchor_array, self.anchor_classes = build_anchors(cfg)
        self.anchors = [Box3D.from_array(row) for row in self.anchor_array]

    # -- parameters ---------------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        return merge_params(
            self.encoder.params(),
            self.fusion.params(),
            self.rpn_head.params(),
            self.roi_pool.params(),
            self.refine_out.params(),
        )

    def save(self, path) -> None:
        save_checkpoint(path, self.params())

    def load(self, path) -> None:
        restore_params(self.params(), load_checkpoint(path))

    # -- stage one -----------------------------------------------------------------

    def rpn_forward(self, bev_dense: Tensor) -> RpnOutput:
        out = self.rpn_head(bev_dense)  # (H*W, anchors_per_cell * 10)
        num_anchors = out.shape[0] * self.cfg.anchors_per_cell
        flat = T.reshape(out, (num_anchors, 10))
        logits = T.reshape(T.slice_cols(flat, 0, 1), (num_anchors,))
        return RpnOutput(logits, T.slice_cols(flat, 1, 8), T.slice_cols(flat, 8, 10))

    def propose(self, rpn: RpnOutput, max_proposals: int) -> ProposalSet:
        """Decode, rank, and de-duplicate anchors into proposal boxes.

        Ranking and suppression run per class with an even share of
        ``max_proposals``, so an easy class cannot crowd the others out
        of stage two. Proposal geometry is treated as data from here on:
        stage two never differentiates through the box coordinates.
        """
        cfg = self.cfg
        scores = T.stable_sigmoid(rpn.logits.data)
        quota = max(1, max_proposals // cfg.num_classes)
        picked: list[int] = []
        box_at: dict[int, Box3D] = {}
        for cls in range(cfg.num_classes):
            rows = np.nonzero(self.anchor_classes == cls)[0]
            if not len(rows):
                continue
            order = rows[np.argsort(-scores[rows], kind="stable")][: cfg.pre_nms_top]
            res = np.clip(rpn.residuals.data[order], -RESIDUAL_CLAMP, RESIDUAL_CLAMP)
            decoded = decode_residual_array(res, self.anchor_array[order])
            boxes = [Box3D.from_array(row) for row in decoded]
            for i in nms_bev(boxes, scores[order], cfg.rpn_nms_iou)[:quota]:
                row = int(order[i])
                picked.append(row)
                box_at[row] = boxes[i]
        picked.sort(key=lambda row: (-scores[row], row))
        sel = np.array(picked, dtype=np.int64)
        return ProposalSet(
            [box_at[row] for row in picked], self.anchor_classes[sel].copy(), scores[sel], sel
        )

    # -- stage two ------------------------------------------------------------------

    def refine(self, rois: list[Box3D], kp_xyz: np.ndarray, kp_feats: Tensor) -> RefineOutput:
        """Affine head over the pooled RoI row: confidence logit plus
        seven residuals. Anything nonlinear has to happen inside the
        pooling; keeping the head affine stops the confidence task from
        rotating position evidence out of a deeper trunk."""
        pooled = self.roi_pool(rois, kp_xyz, kp_feats)
        out = self.refine_out(pooled.fused)
        conf = T.reshape(T.slice_cols(out, 0, 1), (len(rois),))
        return RefineOutput(conf, T.slice_cols(out, 1, 8), pooled)

    # -- full passes -----------------------------------------------------------------

    def forward(self, points: np.ndarray) -> SceneForward | None:
        """Encode, fuse, and score one cloud; None when nothing is in range.

        The fusion stack reads the encoder outputs as plain data. Backprop
        from the refinement losses therefore stops at the keypoint features:
        letting it continue into the shared encoder destabilises the proposal
        head (stage-two gradients are larger and differently shaped, and the
        dense path degenerates to constant logits). The encoder trains from
        the proposal losses; fusion and pooling train from the refinement
        losses.
        """
        encoded = self.encoder.encode(points)
        if len(encoded.keypoint_xyz) == 0:
            return None
        fused = self.fusion(
            T.constant(encoded.point_feats.data),
            T.constant(encoded.vb_feats.data),
            encoded.keypoint_xyz,
        )
        rpn = self.rpn_forward(encoded.bev.dense())
        return SceneForward(encoded, fused, rpn)

    def detect(self, points: np.ndarray) -> list[Detection]:
        """End-to-end inference on one cloud."""
        cfg = self.cfg
        fwd = self.forward(points)
        if fwd is None:
            return []
        props = self.propose(fwd.rpn, cfg.proposals_eval)
        if not props.boxes:
            return []
        ref = self.refine(props.boxes, fwd.encoded.keypoint_xyz, fwd.fused.fused)
        conf = T.stable_sigmoid(ref.conf_logits.data)
        res = np.clip(ref.residuals.data, -RESIDUAL_CLAMP, RESIDUAL_CLAMP)
        roi_arr = np.array([b.to_array() for b in props.boxes])
        final = decode_residual_array(res, roi_arr)
        ranked: list[tuple[float, int, Box3D, int]] = []
        for cls in range(cfg.num_classes):
            idx = np.nonzero((props.classes == cls) & (conf >= cfg.score_threshold))[0]
            if len(idx) == 0:
                continue
            boxes = [Box3D.from_array(final[i]) for i in idx]
            for k in nms_bev(boxes, conf[idx], cfg.final_nms_iou):
                ranked.append((float(conf[idx[k]]), int(idx[k]), boxes[k], cls))
        ranked.sort(key=lambda item: (-item[0], item[1]))
        return [
            Detection(box, score, cfg.class_names[cls])
            for score, _, box, cls in ranked[: cfg.max_detections]
        ]
