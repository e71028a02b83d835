"""AdamW with decoupled weight decay, global-norm clipping and the WSD schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def lr_at_step(t: int, total_steps: int, peak_lr: float, warmup_steps: int, cooldown_steps: int,
               min_lr: float = 0.0) -> float:
    """Warmup, steady, then 1-sqrt cooldown down to ``min_lr`` at ``total_steps``."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if t < warmup_steps:
        return peak_lr * t / warmup_steps
    start = total_steps - cooldown_steps
    if t <= start or cooldown_steps == 0:
        return peak_lr
    p = (t - start) / cooldown_steps
    return min_lr + (peak_lr - min_lr) * (1.0 - math.sqrt(p))


def schedule(config) -> "callable":
    return lambda t: lr_at_step(t, config.total_steps, config.peak_lr, config.warmup_steps,
                                config.cooldown_steps, config.min_lr)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))


def clip_gradients(grads: list, max_norm: float):
    """Scale ``grads`` in place so their global norm is at most ``max_norm``.

    Returns ``(grads, pre_clip_norm)``.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= g.dtype.type(s)
    return grads, norm


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    exempt: "callable" = None  # name -> True when the parameter is not decayed
    state: AdamWState = field(default_factory=AdamWState)

    def step(self, params: dict, grads: dict, lr: float | None = None, decay_scale: float = 1.0):
        """Update ``params`` (name -> ndarray) in place."""
        adamw_step(params, grads, self.state, self.lr if lr is None else lr, self.betas, self.eps,
                   self.weight_decay * decay_scale, self.exempt)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, betas=(0.9, 0.95), eps=1e-8,
               weight_decay: float = 0.0, exempt=None):
    """One AdamW step over ``name -> ndarray`` maps, updating arrays in place.

    Decay is applied to the parameter before the Adam term:
    ``p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name} ({bad} entries)")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= p.dtype.type(b1)
        m += p.dtype.type(1.0 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1.0 - b2) * (g * g)
        wd = 0.0 if exempt is not None and exempt(name) else weight_decay
        if wd:
            p *= p.dtype.type(1.0 - lr * wd)
        denom = np.sqrt(v / p.dtype.type(c2))
        denom += p.dtype.type(eps)
        p -= p.dtype.type(lr / c1) * m / denom
