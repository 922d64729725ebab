"""Adam and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        elif len(self.m) != len(params):
            raise ValueError(f"optimizer state tracks {len(self.m)} tensors, got {len(params)}")


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(grads) != len(params):
        raise MissingGradientError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is None:
            name = params[i].name or f"#{i}"
            raise MissingGradientError(f"no gradient for parameter {name}")
    state.ensure(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(float(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def cosine_lr(epoch: int, epochs: int, lr_init: float, lr_min: float) -> float:
    """Cosine decay from ``lr_init`` at epoch 0 to ``lr_min`` at the last epoch."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epochs == 1:
        return lr_init
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))
