"""Self-check suites: finite-difference gradient checks plus fast invariants.

``run_gradient_checks`` drives every differentiable piece of the stack
(tensor primitives, the three attention operators, the fusion stack,
both pooling routes, the losses) through central finite differences on
small random instances. Every random constant is drawn once when an
instance is built, so the checked function is pure in its input; inputs
that feed kinked ops (relu, abs, max, clip boundaries, the smooth-L1
elbow) are sampled on separated grids so a +/- epsilon probe cannot
cross a non-smooth point and poison the numeric derivative.

``run_invariant_checks`` is a cheap smoke pass over the main algebraic
identities; the exhaustive versions live in the test suite.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import DetectorConfig
from .fusion import (
    FusionStack,
    Neighborhood,
    full_neighborhood,
    point_attention,
    point_voxel_attention,
    standard_attention,
)
from .geometry import Box3D
from .losses import focal_loss, orientation_loss, refinement_cls_loss, smooth_l1
from .pooling import RoIPooling
from .tensor import Tensor, finite_diff_check


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def separated_values(
    rng: np.random.Generator,
    shape,
    lo: float = -1.0,
    hi: float = 1.0,
    avoid: tuple[float, ...] = (0.0,),
    margin: float = 0.02,
) -> np.ndarray:
    """Random values on a grid with guaranteed pairwise and keep-out gaps."""
    n = int(np.prod(shape))
    grid = np.linspace(lo, hi, max(3 * n, 24))
    for a in avoid:
        grid = grid[np.abs(grid - a) > margin]
    if len(grid) < n:
        raise ValueError("separation grid too small for the requested shape")
    vals = rng.choice(grid, size=n, replace=False)
    return vals.reshape(shape)


def _mixer(rng: np.random.Generator):
    """Channel mixer with weights fixed on first use.

    Multiplying by random positive weights before the final sum keeps
    gradient paths from collapsing (a plain sum of softmax rows, say,
    has an identically zero gradient).
    """
    state: dict[str, np.ndarray] = {}

    def mix(out: Tensor) -> Tensor:
        if "w" not in state:
            state["w"] = rng.uniform(0.5, 1.5, out.shape)
        return T.sum_(T.mul(out, T.constant(state["w"])))

    return mix


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    return T.gather_rows(x, np.arange(lo, hi))


def _random_neighborhood(rng: np.random.Generator, nq: int, nk: int) -> Neighborhood:
    q_ids, k_ids = [], []
    for q in range(nq):
        picks = rng.choice(nk, size=int(rng.integers(1, nk + 1)), replace=False)
        for k in np.sort(picks):
            q_ids.append(q)
            k_ids.append(int(k))
    return Neighborhood(np.array(q_ids), np.array(k_ids), nq, nk)


Builder = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor, float]]
_BUILDERS: list[tuple[str, Builder]] = []


def _entry(name: str):
    def register(fn: Builder) -> Builder:
        _BUILDERS.append((name, fn))
        return fn

    return register


# -- tensor primitives ---------------------------------------------------------------


@_entry("add_broadcast")
def _build_add(rng):
    c = T.constant(rng.normal(size=3))
    mix = _mixer(rng)
    return lambda x: mix(T.add(x, c)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("sub_broadcast")
def _build_sub(rng):
    c = T.constant(rng.normal(size=(4, 3)))
    mix = _mixer(rng)
    return lambda x: mix(T.sub(c, x)), T.parameter(rng.normal(size=(1, 3))), 1e-5


@_entry("mul_broadcast")
def _build_mul(rng):
    c = T.constant(rng.normal(size=(4, 1)))
    mix = _mixer(rng)
    return lambda x: mix(T.mul(x, c)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("div_numerator")
def _build_div_num(rng):
    denom = T.constant(separated_values(rng, (4, 3), -2.0, 2.0, margin=0.3))
    mix = _mixer(rng)
    return lambda x: mix(T.div(x, denom)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("div_denominator")
def _build_div_den(rng):
    num = T.constant(rng.normal(size=(4, 3)))
    mix = _mixer(rng)
    x = T.parameter(separated_values(rng, (4, 3), -2.0, 2.0, margin=0.25))
    return lambda x: mix(T.div(num, x)), x, 1e-6


@_entry("matmul_left")
def _build_matmul_left(rng):
    c = T.constant(rng.normal(size=(3, 5)))
    mix = _mixer(rng)
    return lambda x: mix(T.matmul(x, c)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("matmul_right")
def _build_matmul_right(rng):
    c = T.constant(rng.normal(size=(4, 3)))
    mix = _mixer(rng)
    return lambda x: mix(T.matmul(c, x)), T.parameter(rng.normal(size=(3, 5))), 1e-5


@_entry("relu")
def _build_relu(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.relu(x)), T.parameter(separated_values(rng, (4, 3))), 1e-5


@_entry("sigmoid")
def _build_sigmoid(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.sigmoid(x)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("exp")
def _build_exp(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.exp(x)), T.parameter(rng.uniform(-1, 1, (4, 3))), 1e-5


@_entry("log")
def _build_log(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.log(x)), T.parameter(rng.uniform(0.3, 2.0, (4, 3))), 1e-5


@_entry("absolute")
def _build_abs(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.absolute(x)), T.parameter(separated_values(rng, (4, 3))), 1e-5


@_entry("power")
def _build_power(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.power(x, 2.5)), T.parameter(rng.uniform(0.3, 1.5, (4, 3))), 1e-5


@_entry("clip")
def _build_clip(rng):
    mix = _mixer(rng)
    x = T.parameter(separated_values(rng, (4, 3), -2.0, 2.0, avoid=(-1.5, 1.5), margin=0.05))
    return lambda x: mix(T.clip(x, -1.5, 1.5)), x, 1e-5


@_entry("reshape_transpose")
def _build_reshape(rng):
    mix = _mixer(rng)
    return (
        lambda x: mix(T.transpose(T.reshape(x, (3, 4)))),
        T.parameter(rng.normal(size=(4, 3))),
        1e-5,
    )


@_entry("concat_reuse")
def _build_concat(rng):
    mix = _mixer(rng)
    two = T.constant(2.0)
    return (
        lambda x: mix(T.concat([x, T.mul(x, two)], axis=1)),
        T.parameter(rng.normal(size=(4, 3))),
        1e-5,
    )


@_entry("mean_axis")
def _build_mean(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.mean(x, axis=1)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("max_reduce")
def _build_max(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.max_reduce(x, axis=1)), T.parameter(separated_values(rng, (4, 5))), 1e-5


@_entry("softmax")
def _build_softmax(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.softmax(x, axis=-1)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("layer_norm_x")
def _build_ln_x(rng):
    gamma = T.constant(rng.uniform(0.5, 1.5, 4))
    beta = T.constant(rng.normal(size=4))
    mix = _mixer(rng)
    return lambda x: mix(T.layer_norm(x, gamma, beta)), T.parameter(rng.normal(size=(3, 4))), 1e-6


@_entry("layer_norm_params")
def _build_ln_p(rng):
    base = T.constant(rng.normal(size=(3, 4)))
    mix = _mixer(rng)

    def fn(x):
        gamma = T.reshape(_rows(x, 0, 1), (4,))
        beta = T.reshape(_rows(x, 1, 2), (4,))
        return mix(T.layer_norm(base, gamma, beta))

    return fn, T.parameter(rng.normal(size=(2, 4))), 1e-5


@_entry("slice_cols")
def _build_slice(rng):
    mix = _mixer(rng)
    return lambda x: mix(T.slice_cols(x, 1, 3)), T.parameter(rng.normal(size=(4, 5))), 1e-5


@_entry("gather_rows_dup")
def _build_gather(rng):
    idx = np.array([0, 2, 2, 3, 1])
    mix = _mixer(rng)
    return lambda x: mix(T.gather_rows(x, idx)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("scatter_rows_dup")
def _build_scatter(rng):
    idx = np.array([1, 3, 3, 0])
    mix = _mixer(rng)
    return lambda x: mix(T.scatter_rows(x, idx, 5)), T.parameter(rng.normal(size=(4, 3))), 1e-5


@_entry("segment_sum")
def _build_seg_sum(rng):
    seg = np.array([0, 0, 2, 2, 2])
    mix = _mixer(rng)
    return lambda x: mix(T.segment_sum(x, seg, 4)), T.parameter(rng.normal(size=(5, 3))), 1e-5


@_entry("segment_mean")
def _build_seg_mean(rng):
    seg = np.array([1, 1, 1, 3, 3])
    mix = _mixer(rng)
    return lambda x: mix(T.segment_mean(x, seg, 4)), T.parameter(rng.normal(size=(5, 3))), 1e-5


@_entry("segment_max")
def _build_seg_max(rng):
    seg = np.array([0, 0, 0, 2, 2])
    mix = _mixer(rng)
    return lambda x: mix(T.segment_max(x, seg, 3)), T.parameter(separated_values(rng, (5, 3))), 1e-5


# -- attention operators ------------------------------------------------------------


def _attention_builder(flavor: str) -> Builder:
    def build(rng):
        nq, nk, d = 3, 4, 3
        nbhd = _random_neighborhood(rng, nq, nk)
        mix = _mixer(rng)

        def fn(x):
            q = _rows(x, 0, nq)
            k = _rows(x, nq, nq + nk)
            v = _rows(x, nq + nk, nq + 2 * nk)
            if flavor == "standard":
                out = standard_attention(q, k, v, nbhd)
            elif flavor == "point":
                out = point_attention(q, k, v, nbhd)
            else:
                gq = T.sigmoid(T.slice_cols(_rows(x, nq + 2 * nk, 2 * nq + 2 * nk), 0, 1))
                gv = T.sigmoid(T.slice_cols(_rows(x, 2 * nq + 2 * nk, 2 * nq + 3 * nk), 0, 1))
                out = point_voxel_attention(q, k, v, gq, gv, nbhd)
            return mix(out)

        rows = 2 * nq + 3 * nk if flavor == "gated" else nq + 2 * nk
        return fn, T.parameter(rng.normal(size=(rows, d))), 1e-6

    return build


_BUILDERS.append(("standard_attention", _attention_builder("standard")))
_BUILDERS.append(("point_attention", _attention_builder("point")))
_BUILDERS.append(("point_voxel_attention", _attention_builder("gated")))


@_entry("fusion_stack")
def _build_fusion(rng):
    stack = FusionStack(point_dim=3, vb_dim=4, attn_dim=4, depth=2, rng=rng)
    vb = T.constant(rng.normal(size=(4, 4)))
    mix = _mixer(rng)
    return lambda x: mix(stack(x, vb).fused), T.parameter(rng.normal(size=(4, 3))), 1e-6


# -- pooling routes --------------------------------------------------------------------


def _tiny_cfg() -> DetectorConfig:
    return dataclasses.replace(
        DetectorConfig.toy(),
        attn_dim=4,
        point_feat_dim=3,
        cluster_feat_dim=5,
        pyramid_feat_dim=6,
        fused_feat_dim=7,
        pyramid_shapes=((2, 2, 1), (1, 1, 1), (1, 1, 1)),
        pyramid_scales=((1.0, 1.0, 1.0), (1.3, 1.3, 1.3), (1.7, 1.7, 1.7)),
        pyramid_radii=(1.2, 1.6, 2.2),
        dbscan_eps=0.9,
        dbscan_min_pts=2,
    )


def _pool_instance(rng, mode: str) -> tuple[RoIPooling, list[Box3D], np.ndarray]:
    cfg = dataclasses.replace(_tiny_cfg(), pooling_mode=mode)
    pool = RoIPooling(cfg, feat_dim=3, rng=rng)
    rois = [
        Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 3.0, float(rng.uniform(-0.6, 0.6))),
        Box3D(2.5, 1.0, 0.2, 1.8, 1.6, 2.4, float(rng.uniform(-0.6, 0.6))),
    ]
    kp_xyz = np.vstack([
        rng.uniform(-1.2, 1.2, (5, 3)),
        rng.uniform(1.6, 3.2, (4, 3)) * np.array([1.0, 0.5, 0.1]),
    ])
    return pool, rois, kp_xyz


def _pool_builder(mode: str, route: str) -> Builder:
    def build(rng):
        pool, rois, kp_xyz = _pool_instance(rng, mode)
        mix = _mixer(rng)

        def fn(x):
            if route == "cluster":
                out = pool.cluster_features(rois, kp_xyz, x)
            elif route == "pyramid":
                out = pool.pyramid_features(rois, kp_xyz, x)
            elif route == "gph":
                out = pool.gph_features(rois, kp_xyz, x)
            else:
                out = pool(rois, kp_xyz, x).fused
            return mix(out)

        return fn, T.parameter(rng.normal(size=(len(kp_xyz), 3))), 1e-6

    return build


_BUILDERS.append(("cluster_pool", _pool_builder("cph", "cluster")))
_BUILDERS.append(("pyramid_pool", _pool_builder("pph", "pyramid")))
_BUILDERS.append(("grid_pool_baseline", _pool_builder("gph", "gph")))
_BUILDERS.append(("fused_pool", _pool_builder("cph+pph", "fused")))


# -- losses -------------------------------------------------------------------------------


@_entry("focal_loss")
def _build_focal(rng):
    labels = rng.choice([-1, 0, 1], size=6)
    if not (labels >= 0).any():
        labels[0] = 1
    return lambda x: focal_loss(T.sigmoid(x), labels), T.parameter(rng.uniform(-2.5, 2.5, 6)), 1e-5


@_entry("smooth_l1_quadratic")
def _build_sl1_quad(rng):
    target = np.zeros((4, 3))
    return lambda x: smooth_l1(x, target), T.parameter(separated_values(rng, (4, 3), -0.9, 0.9)), 1e-5


@_entry("smooth_l1_linear")
def _build_sl1_lin(rng):
    target = np.zeros((4, 3))
    vals = separated_values(rng, (4, 3), 1.1, 2.0, avoid=()) * rng.choice([-1.0, 1.0], (4, 3))
    return lambda x: smooth_l1(x, target), T.parameter(vals), 1e-5


@_entry("orientation_loss")
def _build_ori(rng):
    bins = rng.integers(0, 2, 5)
    return lambda x: orientation_loss(x, bins), T.parameter(rng.normal(size=(5, 2))), 1e-5


@_entry("refinement_cls_loss")
def _build_refine_cls(rng):
    targets = rng.uniform(0.05, 0.95, 6)
    return (
        lambda x: refinement_cls_loss(T.sigmoid(x), targets),
        T.parameter(rng.uniform(-2.5, 2.5, 6)),
        1e-5,
    )


GRADIENT_CHECK_NAMES = tuple(name for name, _ in _BUILDERS)


def run_gradient_checks(
    seeds: int = 50,
    tolerance: float = 1e-4,
    names: tuple[str, ...] | None = None,
) -> list[CheckResult]:
    """Run every gradient entry over ``seeds`` random instances."""
    results = []
    for name, build in _BUILDERS:
        if names is not None and name not in names:
            continue
        worst = 0.0
        start = time.perf_counter()
        for seed in range(seeds):
            rng = np.random.default_rng([11, seed])
            fn, x, eps = build(rng)
            worst = max(worst, finite_diff_check(fn, x, epsilon=eps))
        took = time.perf_counter() - start
        results.append(CheckResult(
            name, worst <= tolerance,
            f"max rel err {worst:.3e} over {seeds} seeds ({took:.2f}s)",
        ))
    return results


def run_invariant_checks(seed: int = 0) -> list[CheckResult]:
    """Cheap algebraic smoke checks (the exhaustive versions are tests)."""
    from .geometry import generate_grid_points, iou_3d, points_in_box
    from .losses import soft_label

    rng = np.random.default_rng(seed)
    results = []

    # saturated gates turn the gated operator into the standard one
    nq, nk, d = 4, 5, 4
    nbhd = full_neighborhood(nq, nk)
    q = T.constant(rng.normal(size=(nq, d)))
    k = T.constant(rng.normal(size=(nk, d)))
    v = T.constant(rng.normal(size=(nk, d)))
    gated = point_voxel_attention(
        q, k, v, T.constant(np.ones((nq, 1))), T.constant(np.zeros((nk, 1))), nbhd
    )
    plain = standard_attention(q, k, v, nbhd)
    gap = float(np.abs(gated.data - plain.data).max())
    results.append(CheckResult("gate_saturation", gap <= 1e-6, f"max abs gap {gap:.2e}"))

    lo, mid, hi = soft_label(0.25), soft_label(0.5), soft_label(0.75)
    ok = lo == 0.0 and hi == 1.0 and abs(mid - 0.5) <= 1e-12
    results.append(
        CheckResult("soft_label_endpoints", ok, f"y(0.25)={lo} y(0.5)={mid} y(0.75)={hi}")
    )

    worst = 0.0
    for _ in range(20):
        a = Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 2.0, 3), rng.uniform(-np.pi, np.pi))
        b = Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 2.0, 3), rng.uniform(-np.pi, np.pi))
        worst = max(worst, abs(iou_3d(a, b) - iou_3d(b, a)))
    results.append(CheckResult("iou_symmetry", worst <= 1e-12, f"max asymmetry {worst:.2e}"))

    ok = True
    for _ in range(20):
        box = Box3D(*rng.uniform(-2, 2, 3), *rng.uniform(0.8, 2.5, 3), rng.uniform(-np.pi, np.pi))
        pts = generate_grid_points(box, (3, 3, 2), (1.0, 1.0, 1.0))
        ok = ok and bool(points_in_box(pts, box).all())
    results.append(
        CheckResult("grid_containment", ok, "rho=1 lattice inside box" if ok else "point escaped")
    )
    return results
