"""Parameter containers: affine layers, layer-norm weights, checkpoints.

Weights initialise uniformly in +-sqrt(1/fan_in) from a caller-supplied
generator; biases and layer-norm shifts start at zero so a freshly built
layer maps zero input to zero output (identity for layer norm).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = float(np.sqrt(1.0 / max(1, fan_in)))
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return T.parameter(w, name=name)


class Dense:
    """Affine map ``x @ W + b`` with optional ReLU."""

    def __init__(
        self,
        fan_in: int,
        fan_out: int,
        rng: np.random.Generator,
        name: str,
        activation: str | None = None,
        bias_init: float = 0.0,
    ):
        self.name = name
        self.W = init_weight(rng, fan_in, fan_out, f"{name}.W")
        self.b = T.parameter(np.full(fan_out, float(bias_init)), name=f"{name}.b")
        if activation not in (None, "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        out = T.add(T.matmul(x, self.W), self.b)
        if self.activation == "relu":
            out = T.relu(out)
        return out

    def params(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


class LayerNorm:
    """Learnable scale/shift over the last axis."""

    def __init__(self, dim: int, name: str, eps: float = 1e-8):
        self.name = name
        self.gamma = T.parameter(np.ones(dim), name=f"{name}.gamma")
        self.beta = T.parameter(np.zeros(dim), name=f"{name}.beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def params(self) -> dict[str, Tensor]:
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}


def merge_params(*groups: dict[str, Tensor]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for group in groups:
        for key, value in group.items():
            if key in out:
                raise ValueError(f"duplicate parameter name {key!r}")
            out[key] = value
    return out


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Write parameters as an .npz archive keyed by parameter name."""
    arrays = {name: p.data for name, p in params.items()}
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {name: archive[name].astype(np.float64) for name in archive.files}


def restore_params(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameters, validating names and shapes."""
    missing = sorted(set(params) - set(loaded))
    if missing:
        raise KeyError(f"checkpoint is missing parameters: {missing}")
    extra = sorted(set(loaded) - set(params))
    if extra:
        raise KeyError(f"checkpoint has unknown parameters: {extra}")
    for name, p in params.items():
        if loaded[name].shape != p.data.shape:
            raise ValueError(
                f"checkpoint shape {loaded[name].shape} does not match "
                f"parameter {name!r} of shape {p.data.shape}"
            )
        p.data = loaded[name].copy()
