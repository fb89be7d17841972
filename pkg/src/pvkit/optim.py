"""Adam with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    base_lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * step / total_steps)))


def fill_missing_grads(params: dict[str, Tensor]) -> None:
    """Give zero gradients to parameters the last graph never touched."""
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float | None = None,
    lr_scales: dict[str, float] | None = None,
) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Every parameter must carry a gradient (see ``fill_missing_grads``).
    Decay is applied directly to the weights as ``p -= lr * wd * p``,
    independent of the gradient-based update, so a zero-gradient parameter
    still shrinks when decay is enabled. ``lr_scales`` maps parameter-name
    prefixes to multipliers, the usual parameter-group trick; the first
    matching prefix wins.
    """
    if lr is None:
        lr = state.base_lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        lr_p = lr
        if lr_scales:
            for prefix, factor in lr_scales.items():
                if name.startswith(prefix):
                    lr_p = lr * factor
                    break
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        if state.weight_decay:
            p.data -= lr_p * state.weight_decay * p.data
        p.data -= lr_p * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
