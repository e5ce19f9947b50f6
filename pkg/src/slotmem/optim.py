"""AdamW, global-norm clipping, warmup+cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


class AdamW:
    """Decoupled weight decay Adam over a list of Params.

    Weight decay only touches matrices (ndim >= 2); gains, biases and
    per-head scalars are left alone so decay cannot drag them back to
    their (often meaningful) zero init. ``no_decay`` lists parameter
    basenames (the part after the last dot) that are exempt even when
    2-d, for additive offset tables that are biases in all but shape.
    """

    def __init__(self, params, lr=3e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1,
                 no_decay=()):
        if not params:
            raise ConfigError("optimizer needs at least one parameter")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = tuple(no_decay)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            decayable = p.value.ndim >= 2 and p.name.rsplit(".", 1)[-1] not in self.no_decay
            if self.weight_decay and decayable:
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad**2).sum()) for p in params))


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all grads so their joint norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


def lr_at(step: int, total_steps: int, peak: float, warmup_frac: float = 0.03,
          floor: float = 0.0) -> float:
    """Linear warmup from 0 to peak, then cosine down to the floor.

    Step 0 gives exactly 0; the final step gives exactly the floor.
    """
    if total_steps < 1:
        raise ConfigError("total_steps must be positive")
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return peak * step / warm
    if total_steps <= warm:
        return floor
    frac = (step - warm) / (total_steps - warm)
    frac = min(max(frac, 0.0), 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))
