"""Adam with an inverse-square-root warmup schedule and global-norm clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.98
EPS = 1e-9


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then ``peak * sqrt(warmup / step)``."""
    if peak <= 0 or warmup <= 0:
        raise ValueError("schedule parameters must be positive")
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A step with any non-finite gradient entry is skipped and counted in
    ``state.skipped``.
    """
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at update %d; step skipped", state.t + 1)
        return state
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("optimizer state shape mismatch")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the prior norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm
