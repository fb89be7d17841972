"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a vector-Jacobian closure on the
output node; ``Tensor.backward`` replays the tape in reverse topological
order. The engine is deliberately small: 2-D matrices and 1-D vectors
cover everything the detector needs, and all arithmetic stays in double
precision so analytic gradients can be verified against central finite
differences.

The engine is single-threaded. Graph nodes are immutable once created
except for gradient accumulation during ``backward``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class GradientCheckError(RuntimeError):
    """Raised when a finite-difference comparison cannot be completed."""


def _as_f64(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
        name: str | None = None,
    ):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'}{tag})"

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Array | None = None) -> None:
        """Backpropagate from this node.

        ``seed`` defaults to 1.0 and is only optional for single-element
        outputs; larger outputs need an explicit cotangent.
        """
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        seed = _as_f64(seed)
        if seed.shape != self.data.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, _parents=parents, _backward=None)
    if out.requires_grad:
        out._backward = backward(out)
    return out


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return run

    return _node(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return run

    return _node(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return run

    return _node(data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return run

    return _node(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return run

    return _node(data, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return run

    return _node(data, (a,), bw)


def stable_sigmoid(x: Array) -> Array:
    """Logistic function without overflow for very negative inputs."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = stable_sigmoid(a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g * data * (1.0 - data))

        return run

    return _node(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g * data)

        return run

    return _node(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return run

    return _node(data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g * sign)

        return run

    return _node(data, (a,), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a fixed float exponent."""
    data = np.power(a.data, exponent)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

        return run

    return _node(data, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; the gradient passes only inside the band."""
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return run

    return _node(data, (a,), bw)


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.shape))

        return run

    return _node(data, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {a.shape}")
    data = a.data.T.copy()

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g.T)

        return run

    return _node(data, (a,), bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis if axis >= 0 else p.ndim + axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    p._accumulate(g[tuple(sl)])

        return run

    return _node(data, tuple(parts), bw)


# -- reductions ------------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        def run(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).copy())

        return run

    return _node(data, (a,), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ValueError("mean over an empty axis")
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def max_reduce(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the subgradient flows to the first maximiser."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    argmax = a.data.argmax(axis=axis)

    def bw(out):
        def run(g):
            if not a.requires_grad:
                return
            grad = np.zeros_like(a.data)
            gg = g if not keepdims else np.squeeze(g, axis=axis)
            idx = list(np.indices(argmax.shape))
            idx.insert(axis if axis >= 0 else a.ndim + axis, argmax)
            grad[tuple(idx)] = gg
            a._accumulate(grad)

        return run

    return _node(data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run(g):
            if a.requires_grad:
                inner = (g * data).sum(axis=axis, keepdims=True)
                a._accumulate(data * (g - inner))

        return run

    return _node(data, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def bw(out):
        def run(g):
            if beta.requires_grad:
                beta._accumulate(_unbroadcast(g, beta.shape))
            if gamma.requires_grad:
                gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (gx - m1 - xhat * m2))

        return run

    return _node(data, (x, gamma, beta), bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a 2-D tensor."""
    if a.ndim != 2:
        raise ValueError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    if not 0 <= lo < hi <= a.shape[1]:
        raise ValueError(f"column range [{lo}, {hi}) invalid for {a.shape[1]} columns")
    data = a.data[:, lo:hi].copy()

    def bw(out):
        def run(g):
            if a.requires_grad:
                grad = np.zeros_like(a.data)
                grad[:, lo:hi] = g
                a._accumulate(grad)

        return run

    return _node(data, (a,), bw)


# -- gather / scatter / segments ---------------------------------------------------


def _check_rows(op: str, t: Tensor) -> None:
    if t.ndim not in (1, 2):
        raise ValueError(f"{op} expects a 1-D or 2-D tensor, got {t.shape}")


def _group_starts(sorted_ids: np.ndarray) -> np.ndarray:
    """Offsets where each run of equal ids begins (ids must be sorted)."""
    return np.concatenate(([0], np.nonzero(np.diff(sorted_ids))[0] + 1))


def _sort_for_segments(ids: np.ndarray, values: np.ndarray):
    """Return (perm_or_None, sorted_ids, reordered_values).

    Neighborhood queries hand us ids that are already ascending, so the
    common case skips the argsort entirely.
    """
    if ids.size == 0 or np.all(ids[:-1] <= ids[1:]):
        return None, ids, values
    perm = np.argsort(ids, kind="stable")
    return perm, ids[perm], values[perm]


def _row_accumulate(num_rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` rows into ``num_rows`` slots; duplicate indices add.

    ``np.add.at`` dispatches one scalar add per element, which dominated
    profiles of attention over ragged neighborhoods.  Grouping by index and
    reducing each run with ``np.add.reduceat`` keeps the whole thing in
    vectorized code.
    """
    out = np.zeros((num_rows,) + values.shape[1:])
    if index.size == 0:
        return out
    _, sidx, vals = _sort_for_segments(index, values)
    starts = _group_starts(sidx)
    out[sidx[starts]] = np.add.reduceat(vals, starts, axis=0)
    return out


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows ``a[index]``; duplicate indices are allowed."""
    _check_rows("gather_rows", a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(_row_accumulate(a.shape[0], idx, g))

        return run

    return _node(data, (a,), bw)


def scatter_rows(a: Tensor, index, num_rows: int) -> Tensor:
    """Place rows of ``a`` into a zero matrix; duplicate indices add."""
    _check_rows("scatter_rows", a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ValueError(f"scatter_rows needs one index per row, got {idx.shape} for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError(f"scatter_rows index out of range for {num_rows} rows")
    data = _row_accumulate(num_rows, idx, a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                a._accumulate(g[idx])

        return run

    return _node(data, (a,), bw)


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows sharing a segment id; empty segments give zero rows."""
    return scatter_rows(a, segment_ids, num_segments)


def segment_mean(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Average rows per segment; empty segments give zero rows."""
    idx = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(idx, minlength=num_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    total = segment_sum(a, idx, num_segments)
    scale = inv if total.ndim == 1 else inv[:, None]
    return mul(total, Tensor(scale))


def segment_max(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Per-segment, per-channel max; empty segments give zero rows.

    The subgradient flows to the first row attaining each maximum.
    """
    _check_rows("segment_max", a)
    idx = np.asarray(segment_ids, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ValueError(f"segment_max needs one id per row, got {idx.shape} for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_segments):
        raise IndexError(f"segment_max id out of range for {num_segments} segments")
    flat = a.data if a.ndim == 2 else a.data[:, None]
    n, c = flat.shape
    maxes = np.zeros((num_segments, c))
    arg = np.full((num_segments, c), n, dtype=np.int64)
    if n and c:
        perm, sidx, vals = _sort_for_segments(idx, flat)
        starts = _group_starts(sidx)
        seg_max = np.maximum.reduceat(vals, starts, axis=0)
        counts = np.diff(np.append(starts, n))
        hit = vals == np.repeat(seg_max, counts, axis=0)
        cand = np.where(hit, np.arange(n)[:, None], n)
        first = np.minimum.reduceat(cand, starts, axis=0)
        maxes[sidx[starts]] = seg_max
        arg[sidx[starts]] = first if perm is None else perm[first]
    data = maxes if a.ndim == 2 else maxes[:, 0]

    def bw(out):
        def run(g):
            if not a.requires_grad:
                return
            gg = g if a.ndim == 2 else g[:, None]
            grad = np.zeros((n, c))
            rows, cols = np.nonzero(arg < n)
            grad[arg[rows, cols], cols] += gg[rows, cols]
            a._accumulate(grad if a.ndim == 2 else grad[:, 0])

        return run

    return _node(data, (a,), bw)


# -- finite differences ------------------------------------------------------------


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
) -> float:
    """Compare analytic and central-difference gradients of ``sum(fn(x))``.

    Returns the worst relative error ``|analytic - numeric| / max(1, |analytic|)``
    over all coordinates of ``x``. ``fn`` must be a pure function of ``x``;
    ``x.data`` is perturbed in place and restored. ``epsilon`` must lie in
    [1e-7, 1e-4].
    """
    if not (1e-7 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs an input with requires_grad=True")

    def scalar() -> float:
        out = fn(x)
        return float(out.data.sum())

    x.zero_grad()
    out = fn(x)
    total = sum_(out) if out.size != 1 else out
    total.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()
    if not np.all(np.isfinite(analytic)):
        raise GradientCheckError("analytic gradient contains non-finite entries")

    worst = 0.0
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + epsilon
        f_plus = scalar()
        flat[i] = keep - epsilon
        f_minus = scalar()
        flat[i] = keep
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradientCheckError(f"non-finite function value at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
        worst = max(worst, err)
    return worst
