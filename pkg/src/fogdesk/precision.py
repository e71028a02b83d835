"""Precision policies and the per-model GEMM dispatcher.

A :class:`PrecisionPolicy` says which precision each GEMM kind runs in. A
:class:`PrecisionState` owns the mutable side: one scaling history per
(role, operand), call counters, and per-step cast statistics.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from fogdesk.fp8 import (
    DEFAULT_HISTORY_LEN,
    E4M3,
    E5M2,
    CastResult,
    Fp8Format,
    ScalingHistory,
    bf16_round,
    cast_delayed,
    compute_scale,
    quantize_scaled,
    update_history,
)


class Precision(str, enum.Enum):
    FP8 = "fp8"
    BF16 = "bf16"
    FP32 = "fp32"


# GEMM kinds, one per column of the precision table
LINEAR = "linear"
ATTN_SCORES = "attn_scores"
ATTN_VALUES = "attn_values"
OUTPUT = "output"
KINDS = (LINEAR, ATTN_SCORES, ATTN_VALUES, OUTPUT)


@dataclass(frozen=True)
class PrecisionPolicy:
    linear_ops: Precision
    attention_scores: Precision
    attention_value_gemm: Precision
    output_layer: Precision
    forward_format: Fp8Format = E4M3
    backward_format: Fp8Format = E5M2

    def __post_init__(self):
        if self.output_layer is Precision.FP8:
            raise ValueError("the output layer never runs in FP8")

    def for_kind(self, kind: str) -> Precision:
        try:
            return {
                LINEAR: self.linear_ops,
                ATTN_SCORES: self.attention_scores,
                ATTN_VALUES: self.attention_value_gemm,
                OUTPUT: self.output_layer,
            }[kind]
        except KeyError:
            raise ValueError(f"unknown GEMM kind {kind!r}") from None


P = Precision
METHODS = {
    "fp32": PrecisionPolicy(P.FP32, P.FP32, P.FP32, P.FP32),
    "bf16": PrecisionPolicy(P.BF16, P.BF16, P.BF16, P.BF16),
    "fp8": PrecisionPolicy(P.FP8, P.BF16, P.BF16, P.BF16),
    "fp8dpa": PrecisionPolicy(P.FP8, P.FP8, P.FP8, P.BF16),
}


def policy_for(method: str) -> PrecisionPolicy:
    try:
        return METHODS[method.lower()]
    except KeyError:
        raise ValueError(f"unknown precision method {method!r}; choose from {sorted(METHODS)}") from None


@dataclass
class CastStats:
    overflow: int = 0
    underflow: int = 0
    absmax: float = 0.0

    def record(self, res: CastResult):
        self.overflow += res.overflow
        self.underflow += res.underflow
        self.absmax = max(self.absmax, res.absmax)


@dataclass
class _Saved:
    precision: Precision
    role: str
    a: np.ndarray
    b: np.ndarray
    qa: np.ndarray | None = None
    qb: np.ndarray | None = None
    sa: float = 1.0
    sb: float = 1.0
    amax_a: float = 0.0
    amax_b: float = 0.0


def _t(x):
    return np.swapaxes(x, -1, -2)


@dataclass
class PrecisionState:
    policy: PrecisionPolicy
    history_len: int = DEFAULT_HISTORY_LEN
    margin: int = 0
    histories: dict = field(default_factory=dict)
    calls: Counter = field(default_factory=Counter)
    stats: dict = field(default_factory=dict)

    def history(self, role: str, operand: str, fmt: Fp8Format) -> ScalingHistory:
        key = f"{role}|{operand}"
        h = self.histories.get(key)
        if h is None:
            h = self.histories[key] = ScalingHistory(fmt, self.history_len, self.margin)
        return h

    def _stats(self, role: str) -> CastStats:
        s = self.stats.get(role)
        if s is None:
            s = self.stats[role] = CastStats()
        return s

    def reset_stats(self):
        self.stats = {}

    def _cast(self, x, role, operand, fmt):
        res, scale = cast_delayed(x, self.history(role, operand, fmt))
        self._stats(role).record(res)
        return res, scale

    def _recast(self, x, role, operand, fmt, prev_q, prev_scale, amax):
        """Backward re-cast of a saved forward operand under its own history.

        The cached forward cast is reused whenever the scales coincide, which
        gives the same values without another pass over the data.
        """
        h = self.history(role, operand, fmt)
        if h.empty():
            update_history(h, amax)
            scale = compute_scale(h)
        else:
            scale = compute_scale(h)
            update_history(h, amax)
        if prev_q is not None and scale == prev_scale and fmt is self.policy.forward_format:
            return prev_q, scale
        return quantize_scaled(x, scale, fmt).values, scale

    # -- GEMM -----------------------------------------------------------------

    def forward(self, a: np.ndarray, b: np.ndarray, role: str, kind: str):
        prec = self.policy.for_kind(kind)
        self.calls[(kind, prec.value, "fwd")] += 1
        if prec is Precision.FP32:
            return a @ b, _Saved(prec, role, a, b)
        if prec is Precision.BF16:
            ra, rb = bf16_round(a), bf16_round(b)
            return ra @ rb, _Saved(prec, role, a, b, ra, rb)
        fmt = self.policy.forward_format
        ca, sa = self._cast(a, role, "x", fmt)
        cb, sb = self._cast(b, role, "w", fmt)
        out = ca.values @ cb.values
        out /= out.dtype.type(sa * sb)
        return out, _Saved(prec, role, a, b, ca.values, cb.values, sa, sb, ca.absmax, cb.absmax)

    def backward(self, g: np.ndarray, saved: _Saved, kind: str, need_a=True, need_b=True):
        """Gradients ``(g @ b.T, a.T @ g)`` before any broadcast reduction."""
        prec = saved.precision
        self.calls[(kind, prec.value, "bwd")] += 1
        da = db = None
        if prec is Precision.FP32:
            if need_a:
                da = g @ _t(saved.b)
            if need_b:
                db = _t(saved.a) @ g
            return da, db
        if prec is Precision.BF16:
            rg = bf16_round(g)
            if need_a:
                da = rg @ _t(saved.qb)
            if need_b:
                db = _t(saved.qa) @ rg
            return da, db
        role = saved.role
        fwd_fmt, bwd_fmt = self.policy.forward_format, self.policy.backward_format
        cg, sg = self._cast(g, role, "dy", bwd_fmt)
        if need_a:
            qb, sb = self._recast(saved.b, role, "w.bwd", fwd_fmt, saved.qb, saved.sb, saved.amax_b)
            da = cg.values @ _t(qb)
            da /= da.dtype.type(sg * sb)
        if need_b:
            qa, sa = self._recast(saved.a, role, "x.bwd", fwd_fmt, saved.qa, saved.sa, saved.amax_a)
            db = _t(qa) @ cg.values
            db /= db.dtype.type(sa * sg)
        return da, db

    # -- persistence ------------------------------------------------------------

    def state(self) -> dict:
        return {k: h.state() for k, h in self.histories.items()}

    def load_state(self, state: dict):
        self.histories = {k: ScalingHistory.from_state(v) for k, v in state.items()}
