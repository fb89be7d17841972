"""Attention operators and the gated point-voxel fusion stack.

Three neighborhood attention flavors share one pair-list layout:

* ``standard_attention``   -- softmax(QK^T) V
* ``point_attention``      -- channelwise softmax(Q + K) * (V + Q)
* ``point_voxel_attention``-- softmax(gate_qk * QK^T) * (V + gate_v * Q)

The gates are per-token scalars in (0, 1); driving gate_qk to one and
gate_v to zero recovers standard attention exactly. The fusion stack
self-attends both token streams, projects them into a shared width,
runs the gated attention, self-attends the result, and finishes with a
skip connection into layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .neighbors import HashGrid
from .nn import Dense, LayerNorm, merge_params
from .tensor import Tensor


@dataclass
class Neighborhood:
    """Flattened query->key pairs; queries may have zero pairs."""

    query_ids: np.ndarray  # (P,)
    key_ids: np.ndarray  # (P,)
    num_queries: int
    num_keys: int

    def __post_init__(self):
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.key_ids = np.asarray(self.key_ids, dtype=np.int64)
        if self.query_ids.shape != self.key_ids.shape or self.query_ids.ndim != 1:
            raise ValueError("query_ids and key_ids must be matching 1-D arrays")
        if len(self.query_ids):
            if self.query_ids.min() < 0 or self.query_ids.max() >= self.num_queries:
                raise IndexError("query id out of range")
            if self.key_ids.min() < 0 or self.key_ids.max() >= self.num_keys:
                raise IndexError("key id out of range")


def full_neighborhood(num_queries: int, num_keys: int) -> Neighborhood:
    """Every query attends to every key."""
    q = np.repeat(np.arange(num_queries, dtype=np.int64), num_keys)
    k = np.tile(np.arange(num_keys, dtype=np.int64), num_queries)
    return Neighborhood(q, k, num_queries, num_keys)


def radius_neighborhood(query_xyz: np.ndarray, key_xyz: np.ndarray, radius: float) -> Neighborhood:
    """Each query attends to keys within ``radius``; infinite radius is full."""
    nq, nk = len(query_xyz), len(key_xyz)
    if not np.isfinite(radius):
        return full_neighborhood(nq, nk)
    if nk == 0 or nq == 0:
        return Neighborhood(np.empty(0, np.int64), np.empty(0, np.int64), nq, nk)
    grid = HashGrid(np.asarray(key_xyz, dtype=np.float64), max(radius, 1e-6))
    q_ids, k_ids = grid.query_pairs(np.asarray(query_xyz, dtype=np.float64), radius)
    return Neighborhood(q_ids, k_ids, nq, nk)


def segment_softmax(logits: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax within each segment (per channel for 2-D logits)."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    peak = T.segment_max(logits, seg, num_segments)
    shifted = T.sub(logits, T.gather_rows(peak, seg))
    e = T.exp(shifted)
    denom = T.segment_sum(e, seg, num_segments)
    return T.div(e, T.gather_rows(denom, seg))


def _check_dims(op: str, q: Tensor, k: Tensor, v: Tensor, nbhd: Neighborhood) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError(f"{op} expects 2-D Q/K/V")
    if q.shape[0] != nbhd.num_queries:
        raise ValueError(f"{op}: {q.shape[0]} queries but neighborhood says {nbhd.num_queries}")
    if k.shape[0] != nbhd.num_keys or v.shape[0] != nbhd.num_keys:
        raise ValueError(f"{op}: key/value rows do not match neighborhood keys {nbhd.num_keys}")


def standard_attention(
    q: Tensor, k: Tensor, v: Tensor, nbhd: Neighborhood, scale: bool = True
) -> Tensor:
    """Scaled dot-product attention over the pair list; empty rows give zero."""
    _check_dims("standard_attention", q, k, v, nbhd)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if len(nbhd.query_ids) == 0:
        return T.constant(np.zeros((nbhd.num_queries, v.shape[1])))
    qg = T.gather_rows(q, nbhd.query_ids)
    kg = T.gather_rows(k, nbhd.key_ids)
    logits = T.sum_(T.mul(qg, kg), axis=1)
    if scale:
        logits = T.mul(logits, T.constant(1.0 / np.sqrt(q.shape[1])))
    w = segment_softmax(logits, nbhd.query_ids, nbhd.num_queries)
    vg = T.gather_rows(v, nbhd.key_ids)
    weighted = T.mul(T.reshape(w, (len(nbhd.query_ids), 1)), vg)
    return T.segment_sum(weighted, nbhd.query_ids, nbhd.num_queries)


def point_attention(q: Tensor, k: Tensor, v: Tensor, nbhd: Neighborhood) -> Tensor:
    """Channelwise additive attention: softmax_j(Q_i + K_j) * (V_j + Q_i)."""
    _check_dims("point_attention", q, k, v, nbhd)
    if not (q.shape[1] == k.shape[1] == v.shape[1]):
        raise ValueError("point_attention needs equal Q/K/V widths")
    if len(nbhd.query_ids) == 0:
        return T.constant(np.zeros((nbhd.num_queries, v.shape[1])))
    qg = T.gather_rows(q, nbhd.query_ids)
    kg = T.gather_rows(k, nbhd.key_ids)
    w = segment_softmax(T.add(qg, kg), nbhd.query_ids, nbhd.num_queries)
    vals = T.add(T.gather_rows(v, nbhd.key_ids), qg)
    return T.segment_sum(T.mul(w, vals), nbhd.query_ids, nbhd.num_queries)


def point_voxel_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    gate_qk: Tensor,
    gate_v: Tensor,
    nbhd: Neighborhood,
    scale: bool = True,
) -> Tensor:
    """Gated cross attention: softmax(gate_qk * QK^T) * (V + gate_v * Q).

    ``gate_qk`` holds one scalar per query (it tempers that query's
    logits); ``gate_v`` one scalar per key (it controls how much of the
    query leaks into that key's value).
    """
    _check_dims("point_voxel_attention", q, k, v, nbhd)
    if q.shape[1] != k.shape[1] or q.shape[1] != v.shape[1]:
        raise ValueError("point_voxel_attention needs equal Q/K/V widths")
    if gate_qk.shape[0] != nbhd.num_queries or gate_v.shape[0] != nbhd.num_keys:
        raise ValueError("gate rows must match query/key counts")
    if len(nbhd.query_ids) == 0:
        return T.constant(np.zeros((nbhd.num_queries, v.shape[1])))
    p = len(nbhd.query_ids)
    qg = T.gather_rows(q, nbhd.query_ids)
    kg = T.gather_rows(k, nbhd.key_ids)
    logits = T.sum_(T.mul(qg, kg), axis=1)
    if scale:
        logits = T.mul(logits, T.constant(1.0 / np.sqrt(q.shape[1])))
    gq = T.reshape(T.gather_rows(gate_qk, nbhd.query_ids), (p,))
    logits = T.mul(logits, gq)
    w = segment_softmax(logits, nbhd.query_ids, nbhd.num_queries)
    gv = T.gather_rows(gate_v, nbhd.key_ids)
    if gv.ndim == 1:
        gv = T.reshape(gv, (p, 1))
    vals = T.add(T.gather_rows(v, nbhd.key_ids), T.mul(gv, qg))
    weighted = T.mul(T.reshape(w, (p, 1)), vals)
    return T.segment_sum(weighted, nbhd.query_ids, nbhd.num_queries)


class SelfAttention:
    """Single-head self-attention with skip connection and layer norm."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str, scale: bool = True):
        self.dim = dim
        self.scale = scale
        self.q_proj = Dense(dim, dim, rng, f"{name}.q_proj")
        self.k_proj = Dense(dim, dim, rng, f"{name}.k_proj")
        self.v_proj = Dense(dim, dim, rng, f"{name}.v_proj")
        self.norm = LayerNorm(dim, f"{name}.norm")

    def __call__(self, x: Tensor, nbhd: Neighborhood | None = None) -> Tensor:
        n = x.shape[0]
        if n == 0:
            return x
        if nbhd is None:
            nbhd = full_neighborhood(n, n)
        attended = standard_attention(
            self.q_proj(x), self.k_proj(x), self.v_proj(x), nbhd, scale=self.scale
        )
        return self.norm(T.add(x, attended))

    def params(self) -> dict[str, Tensor]:
        return merge_params(
            self.q_proj.params(), self.k_proj.params(), self.v_proj.params(), self.norm.params()
        )


@dataclass
class FusionResult:
    fused: Tensor  # (K, attn_dim)
    point_tokens: Tensor  # point branch after self-attention
    vb_tokens: Tensor  # voxel/BEV branch after self-attention
    attended: list[Tensor]  # per block, the gated cross-attention output


class FusionBlock:
    """One fusion round: project, gated cross-attention, self-attend, norm."""

    def __init__(
        self,
        point_dim: int,
        vb_dim: int,
        attn_dim: int,
        rng: np.random.Generator,
        name: str,
        scale: bool = True,
    ):
        self.scale = scale
        self.query_proj = Dense(point_dim, attn_dim, rng, f"{name}.query_proj")
        self.key_proj = Dense(vb_dim, attn_dim, rng, f"{name}.key_proj")
        self.value_proj = Dense(vb_dim, attn_dim, rng, f"{name}.value_proj")
        self.gate_qk = Dense(attn_dim, 1, rng, f"{name}.gate_qk")
        self.gate_v = Dense(attn_dim, 1, rng, f"{name}.gate_v")
        self.post_attn = SelfAttention(attn_dim, rng, f"{name}.post_attn", scale=scale)
        self.norm = LayerNorm(attn_dim, f"{name}.norm")

    def __call__(
        self, point_tokens: Tensor, vb_tokens: Tensor, nbhd: Neighborhood
    ) -> tuple[Tensor, Tensor]:
        q = self.query_proj(point_tokens)
        k = self.key_proj(vb_tokens)
        v = self.value_proj(vb_tokens)
        sigma_qk = T.sigmoid(self.gate_qk(q))
        sigma_v = T.sigmoid(self.gate_v(v))
        attended = point_voxel_attention(q, k, v, sigma_qk, sigma_v, nbhd, scale=self.scale)
        refined = self.post_attn(attended, nbhd)
        return self.norm(T.add(refined, attended)), attended

    def params(self) -> dict[str, Tensor]:
        return merge_params(
            self.query_proj.params(),
            self.key_proj.params(),
            self.value_proj.params(),
            self.gate_qk.params(),
            self.gate_v.params(),
            self.post_attn.params(),
            self.norm.params(),
        )


class FusionStack:
    """Self-attend both streams once, then run ``depth`` fusion blocks.

    A finite ``radius`` restricts every attention pass (the two
    self-attentions and the cross-attention blocks) to keypoints within
    that distance of the query keypoint.
    """

    def __init__(
        self,
        point_dim: int,
        vb_dim: int,
        attn_dim: int,
        depth: int,
        rng: np.random.Generator,
        scale: bool = True,
        radius: float = np.inf,
    ):
        if depth < 1:
            raise ValueError("fusion depth must be at least 1")
        self.radius = radius
        self.point_attn = SelfAttention(point_dim, rng, "fusion.point_attn", scale=scale)
        self.vb_attn = SelfAttention(vb_dim, rng, "fusion.vb_attn", scale=scale)
        self.blocks = [
            FusionBlock(
                point_dim if i == 0 else attn_dim,
                vb_dim,
                attn_dim,
                rng,
                f"fusion.block{i}",
                scale=scale,
            )
            for i in range(depth)
        ]

    def __call__(
        self,
        point_feats: Tensor,
        vb_feats: Tensor,
        kp_xyz: np.ndarray | None = None,
    ) -> FusionResult:
        n = point_feats.shape[0]
        if vb_feats.shape[0] != n:
            raise ValueError(
                f"point and voxel/BEV token counts disagree: {n} vs {vb_feats.shape[0]}"
            )
        if np.isfinite(self.radius) and kp_xyz is not None:
            nbhd = radius_neighborhood(kp_xyz, kp_xyz, self.radius)
        else:
            nbhd = full_neighborhood(n, n)
        point_tokens = self.point_attn(point_feats, nbhd)
        vb_tokens = self.vb_attn(vb_feats, nbhd)
        current = point_tokens
        attended_all: list[Tensor] = []
        for block in self.blocks:
            current, attended = block(current, vb_tokens, nbhd)
            attended_all.append(attended)
        return FusionResult(current, point_tokens, vb_tokens, attended_all)

    def params(self) -> dict[str, Tensor]:
        groups = [self.point_attn.params(), self.vb_attn.params()]
        groups.extend(b.params() for b in self.blocks)
        return merge_params(*groups)
