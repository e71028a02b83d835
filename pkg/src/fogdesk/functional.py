"""Differentiable building blocks for the transformer models.

Ops are fused at the granularity the models need (whole RMSNorm, whole
softmax, whole cross-entropy) so that both the forward and the hand-written
backward stay vectorised.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy import special

from fogdesk import _kernels
from fogdesk.precision import LINEAR, PrecisionState
from fogdesk.tensor import Tensor, make, unbroadcast

RMS_EPS = 1e-6
XIELU_BETA = 0.5


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, role: str | None = None, kind: str = LINEAR,
           precision: PrecisionState | None = None) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dimensions.

    With a ``precision`` state the GEMM runs in whatever precision the policy
    assigns to ``kind``; the backward pass goes through the same state.
    """
    if b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    lead = None
    if bd.ndim == 2 and ad.ndim > 2:
        # weight GEMM: fold batch dims so the weight gradient is one GEMM
        lead = ad.shape[:-1]
        ad = ad.reshape(-1, ad.shape[-1])
    if precision is None:
        out = ad @ bd
        saved = None
    else:
        if role is None:
            raise ValueError("a precision-managed matmul needs a role tag")
        out, saved = precision.forward(ad, bd, role, kind)

    def backward(g):
        if lead is not None:
            g = g.reshape(-1, g.shape[-1])
        if saved is None:
            da = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            db = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        else:
            da, db = precision.backward(g, saved, kind, a.requires_grad, b.requires_grad)
        if da is not None:
            da = da.reshape(a.shape) if lead is not None else unbroadcast(da, a.shape)
        if db is not None:
            db = unbroadcast(db, b.shape)
        return da, db

    if lead is not None:
        out = out.reshape(lead + (bd.shape[-1],))
    t = make(out, (a, b), backward, "matmul")
    t.meta = role
    return t


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make(weight.data[ids], (weight,), backward, "embedding")


# -- normalisation -------------------------------------------------------------


def rmsnorm(x: Tensor, gains=None, eps: float = RMS_EPS) -> Tensor:
    """``x / rms(x) * gains`` over the last axis, ``rms = sqrt(mean(x**2) + eps)``.

    ``gains`` may be a Tensor (trainable), an array (frozen) or None (unit).
    """
    xd = x.data
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xh = xd * inv
    gt = gains if isinstance(gains, Tensor) else None
    gv = gt.data if gt is not None else (None if gains is None else np.asarray(gains, dtype=xd.dtype))
    out = xh if gv is None else xh * gv

    def backward(g):
        dxh = g if gv is None else g * gv
        dx = inv * (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True))
        res = [dx]
        if gt is not None:
            res.append((g * xh).reshape(-1, xd.shape[-1]).sum(axis=0).reshape(gt.shape))
        return tuple(res)

    parents = (x,) if gt is None else (x, gt)
    return make(out, parents, backward, "rmsnorm")


# -- activations -----------------------------------------------------------------


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return make(out, (x,), backward, "gelu")


def _sigmoid(z):
    return special.expit(z).astype(z.dtype, copy=False)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sg = _sigmoid(xd)

    def backward(g):
        return (g * sg * (1 + xd * (1 - sg)),)

    return make(xd * sg, (x,), backward, "silu")


def swiglu(gate: Tensor, value: Tensor) -> Tensor:
    """``silu(gate) * value``."""
    gd, vd = gate.data, value.data
    sg = _sigmoid(gd)
    act = gd * sg

    def backward(g):
        return g * vd * sg * (1 + gd * (1 - sg)), g * act

    return make(act * vd, (gate, value), backward, "swiglu")


def _softplus(z):
    return np.logaddexp(0.0, z)


def xielu(x: Tensor, alpha_p: Tensor, alpha_n: Tensor, beta: float = XIELU_BETA) -> Tensor:
    """Trainable activation with a quadratic positive branch.

    ``x > 0``: ``ap * x**2 + beta * x``; ``x <= 0``: ``an * (exp(x) - 1 - x) + beta * x``
    with ``ap = softplus(alpha_p)`` and ``an = beta + softplus(alpha_n)``, which
    keeps both coefficients positive.
    """
    xd = x.data
    ap = _softplus(alpha_p.data)
    an = beta + _softplus(alpha_n.data)
    pos = xd > 0
    xn = np.minimum(xd, 0.0)
    em1 = np.expm1(xn)
    out = np.where(pos, ap * xd * xd + beta * xd, an * (em1 - xn) + beta * xd).astype(xd.dtype)

    def backward(g):
        dx = g * np.where(pos, 2 * ap * xd + beta, an * em1 + beta)
        dap = np.sum(g * np.where(pos, xd * xd, 0.0)) * _sigmoid(alpha_p.data)
        dan = np.sum(g * np.where(pos, 0.0, em1 - xn)) * _sigmoid(alpha_n.data)
        return (dx.astype(xd.dtype), np.reshape(dap, alpha_p.shape).astype(xd.dtype),
                np.reshape(dan, alpha_n.shape).astype(xd.dtype))

    return make(out, (x, alpha_p, alpha_n), backward, "xielu")


def tanh_alpha(x: Tensor, alpha) -> Tensor:
    """``tanh(alpha * x)``; ``alpha`` is a scalar Tensor (trainable) or float."""
    xd = x.data
    at = alpha if isinstance(alpha, Tensor) else None
    a = at.data if at is not None else np.asarray(alpha, dtype=xd.dtype)
    y = np.tanh(a * xd)

    def backward(g):
        d = g * (1 - y * y)
        res = [d * a]
        if at is not None:
            res.append(np.reshape(np.sum(d * xd), at.shape).astype(xd.dtype))
        return tuple(res)

    return make(y, (x,) if at is None else (x, at), backward, "tanh_alpha")


ACTIVATIONS = ("gelu", "silu", "swiglu", "smoothswiglu", "xielu", "tanh_alpha")
GLU_ACTIVATIONS = ("swiglu", "smoothswiglu")


def activation(kind: str, *inputs):
    """Dispatch by name; GLU kinds take ``(gate, value)``.

    ``smoothswiglu`` is numerically SwiGLU here; its per-channel rescaling is
    applied around the down projection by the FFN that owns it.
    """
    if kind == "gelu":
        return gelu(*inputs)
    if kind == "silu":
        return silu(*inputs)
    if kind in GLU_ACTIVATIONS:
        return swiglu(*inputs)
    if kind == "xielu":
        return xielu(*inputs)
    if kind == "tanh_alpha":
        return tanh_alpha(*inputs)
    raise ValueError(f"unknown activation {kind!r}")


# -- attention pieces --------------------------------------------------------------

ROPE_BASE = 10000.0


@functools.lru_cache(maxsize=64)
def _rope_table(positions: tuple, dim: int, base: float, dtype_str: str):
    pos = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype_str), np.sin(ang).astype(dtype_str)


def rope(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotary embedding over the last axis; ``positions`` index axis -2.

    Features ``(2i, 2i+1)`` are rotated by ``pos * base**(-2i/d)``.
    """
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rotary embedding needs an even head dimension, got {d}")
    positions = tuple(int(p) for p in np.asarray(positions).reshape(-1))
    if len(positions) != x.shape[-2]:
        raise ValueError("one position per row is required")
    cos, sin = _rope_table(positions, d, float(base), x.dtype.str)
    pairs = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1).reshape(x.shape)

    def backward(g):
        gp = g.reshape(pairs.shape)
        g0, g1 = gp[..., 0], gp[..., 1]
        return (np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1).reshape(x.shape),)

    return make(out, (x,), backward, "rope")


def causal_mask(n_q: int, n_k: int | None = None, dtype=np.float32) -> np.ndarray:
    """Additive mask, ``-inf`` where key index is ahead of the query."""
    n_k = n_q if n_k is None else n_k
    q = np.arange(n_q)[:, None] + (n_k - n_q)
    k = np.arange(n_k)[None, :]
    return np.where(k > q, -np.inf, 0.0).astype(dtype)


def softmax_rows(s: Tensor, mask=None, scale: float = 1.0) -> Tensor:
    """Row softmax of ``scale * s + mask`` over the last axis.

    ``mask`` is an additive array (``-inf`` = masked), the string ``"causal"``
    or None. Fully-masked rows come out as zeros and are flagged in
    ``out.meta["fully_masked"]``.
    """
    sd = s.data
    if (isinstance(mask, str) and mask == "causal" and sd.dtype == np.float32
            and sd.shape[-1] >= sd.shape[-2]):
        lead = sd.shape[:-2]
        flat = np.ascontiguousarray(sd).reshape((-1,) + sd.shape[-2:])
        p = np.empty_like(flat)
        _kernels.causal_softmax_f32(flat, scale, p)
        p = p.reshape(sd.shape)
        dead = np.zeros(lead + sd.shape[-2:-1], dtype=bool)
    else:
        if isinstance(mask, str):
            if mask != "causal":
                raise ValueError(f"unknown mask {mask!r}")
            mask = causal_mask(sd.shape[-2], sd.shape[-1], sd.dtype)
        z = sd * sd.dtype.type(scale)
        if mask is not None:
            z = z + np.asarray(mask, dtype=sd.dtype)
        m = np.max(z, axis=-1, keepdims=True)
        dead = np.isneginf(m[..., 0])
        m = np.where(np.isneginf(m), 0.0, m)
        e = np.exp(z - m)
        tot = e.sum(axis=-1, keepdims=True)
        p = np.where(dead[..., None], 0.0, e / np.where(tot == 0, 1.0, tot)).astype(sd.dtype)

    def backward(g):
        if g.dtype == np.float32 and p.ndim >= 2:
            shp = (-1,) + p.shape[-2:]
            out = np.empty_like(np.ascontiguousarray(p).reshape(shp))
            _kernels.softmax_backward_f32(np.ascontiguousarray(p).reshape(shp),
                                          np.ascontiguousarray(g).reshape(shp), scale, out)
            return (out.reshape(p.shape),)
        return (scale * p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    out = make(p, (s,), backward, "softmax")
    out.meta = {"fully_masked": dead}
    return out


# -- loss ------------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token negative log-likelihood for ``(M, V)`` logits."""
    ld = logits.data
    t = np.asarray(targets).reshape(-1)
    if ld.ndim != 2 or ld.shape[0] != t.shape[0]:
        raise ValueError(f"logits {ld.shape} do not match {t.shape[0]} targets")
    V = ld.shape[1]
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ValueError(f"target ids must lie in [0, {V})")
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(t.size)
    loss = np.mean(lse[:, 0] - z[rows, t])

    def backward(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        return (p * (g / t.size),)

    return make(np.asarray(loss, dtype=ld.dtype), (logits,), backward, "cross_entropy")
