"""FP8 (E4M3 / E5M2) and BF16 numerics, delayed scaling, scaled GEMM.

Scalar codec functions work on Python floats and 8-bit integer codes. The
array path (:func:`quantize`) is what the training engine uses; it rounds
onto the same grid without materialising codes.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from fogdesk import _kernels


class SpecialPolicy(enum.Enum):
    FINITE_NAN = "e4m3"  # no infinities, only S.1111.111 is NaN
    IEEE = "e5m2"  # all-ones exponent holds Inf / NaN


@dataclass(frozen=True)
class Fp8Format:
    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    max_finite: float
    special_policy: SpecialPolicy

    def __post_init__(self):
        if self.exponent_bits + self.mantissa_bits != 7:
            raise ValueError("an FP8 format has 7 non-sign bits")

    @property
    def emin(self) -> int:
        """Exponent of the smallest normal binade."""
        return 1 - self.bias

    @property
    def nan_code(self) -> int:
        if self.special_policy is SpecialPolicy.FINITE_NAN:
            return 0x7F
        return 0x7E

    @property
    def max_code(self) -> int:
        if self.special_policy is SpecialPolicy.FINITE_NAN:
            return 0x7E
        return ((1 << self.exponent_bits) - 2) << self.mantissa_bits | ((1 << self.mantissa_bits) - 1)

    def is_nan_code(self, code: int) -> bool:
        exp = (code >> self.mantissa_bits) & ((1 << self.exponent_bits) - 1)
        man = code & ((1 << self.mantissa_bits) - 1)
        all_ones = (1 << self.exponent_bits) - 1
        if self.special_policy is SpecialPolicy.FINITE_NAN:
            return exp == all_ones and man == (1 << self.mantissa_bits) - 1
        return exp == all_ones and man != 0

    def __repr__(self):
        return f"Fp8Format({self.name})"


E4M3 = Fp8Format("E4M3", 4, 3, 7, 448.0, SpecialPolicy.FINITE_NAN)
E5M2 = Fp8Format("E5M2", 5, 2, 15, 57344.0, SpecialPolicy.IEEE)
FORMATS = {"E4M3": E4M3, "E5M2": E5M2}


def decode_fp8(code: int, fmt: Fp8Format) -> float:
    """Exact value of an 8-bit code; NaN patterns give ``math.nan``."""
    code = int(code) & 0xFF
    sign = -1.0 if code & 0x80 else 1.0
    exp = (code >> fmt.mantissa_bits) & ((1 << fmt.exponent_bits) - 1)
    man = code & ((1 << fmt.mantissa_bits) - 1)
    if fmt.is_nan_code(code):
        return math.nan
    if fmt.special_policy is SpecialPolicy.IEEE and exp == (1 << fmt.exponent_bits) - 1:
        return sign * math.inf
    if exp == 0:
        return sign * math.ldexp(man, fmt.emin - fmt.mantissa_bits)
    return sign * math.ldexp((1 << fmt.mantissa_bits) + man, exp - fmt.bias - fmt.mantissa_bits)


def encode_fp8(value: float, fmt: Fp8Format) -> int:
    """Nearest code under round-to-nearest-even, saturating at ``max_finite``."""
    value = float(value)
    if math.isnan(value):
        return fmt.nan_code
    sign = 0x80 if math.copysign(1.0, value) < 0 else 0
    a = abs(value)
    if a == 0.0:
        return sign
    if a >= fmt.max_finite:
        return sign | fmt.max_code
    mb = fmt.mantissa_bits
    _, e = math.frexp(a)
    binade = max(e - 1, fmt.emin)
    n = round(math.ldexp(a, mb - binade))  # exact; round() is half-to-even
    if binade == fmt.emin and n < (1 << mb):
        return sign | n  # subnormal
    if n == 1 << (mb + 1):
        binade += 1
        n = 1 << mb
    code = ((binade + fmt.bias) << mb) | (n - (1 << mb))
    if code > fmt.max_code:
        return sign | fmt.max_code
    return sign | code


def decode_table(fmt: Fp8Format) -> np.ndarray:
    """float64 values of all 256 codes, indexed by code."""
    return np.array([decode_fp8(c, fmt) for c in range(256)])


# -- array rounding --------------------------------------------------------


def round_to_grid(x: np.ndarray, mantissa_bits: int, emin: int, max_finite: float | None) -> np.ndarray:
    """Generic RNE rounding to ``mantissa_bits`` explicit bits (any float dtype).

    ``max_finite=None`` means no saturation (overflow is left to the dtype).
    """
    x = np.asarray(x)
    a = np.abs(x)
    _, e = np.frexp(a)
    binade = np.maximum(e - 1, emin)
    q = np.ldexp(np.rint(np.ldexp(a, mantissa_bits - binade)), binade - mantissa_bits)
    if max_finite is not None:
        q = np.minimum(q, max_finite)
    q = np.where(np.isnan(x), x, q)
    return np.copysign(q, x).astype(x.dtype, copy=False)


def _sub_table(fmt: Fp8Format) -> np.ndarray:
    quantum = 2.0 ** (fmt.emin - fmt.mantissa_bits)
    vals = np.array([q * quantum for q in range((1 << fmt.mantissa_bits) + 1)], dtype=np.float32)
    return vals.view(np.uint32).astype(np.int64)


_KERNEL_ARGS = {
    f.name: (f.mantissa_bits, f.emin, int(np.float32(f.max_finite).view(np.uint32)), _sub_table(f))
    for f in (E4M3, E5M2)
}


@dataclass
class CastResult:
    values: np.ndarray  # on the FP8 grid, still in the scaled domain
    absmax: float  # of the unscaled input
    overflow: int = 0
    underflow: int = 0


def quantize_scaled(x: np.ndarray, scale: float, fmt: Fp8Format) -> CastResult:
    """Cast ``scale * x`` element-wise to ``fmt`` and report saturation stats."""
    x = np.asarray(x)
    if x.dtype == np.float32:
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        amax, over, under = _kernels.cast_scaled_f32(flat, scale, *_KERNEL_ARGS[fmt.name], out)
        return CastResult(out.reshape(x.shape), float(amax), int(over), int(under))
    y = x * x.dtype.type(scale)
    q = round_to_grid(y, fmt.mantissa_bits, fmt.emin, None)
    over = int(np.count_nonzero(np.abs(q) > fmt.max_finite))
    q = np.clip(q, -fmt.max_finite, fmt.max_finite)
    under = int(np.count_nonzero((q == 0) & (y != 0)))
    return CastResult(q, float(np.max(np.abs(x), initial=0.0)), over, under)


def quantize(x: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """Round an array onto the ``fmt`` grid (no scaling)."""
    return quantize_scaled(x, 1.0, fmt).values


def bf16_round(x):
    """Round to bfloat16 (8 significant bits, float32 exponent range), RNE."""
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(round_to_grid(np.float64(x), 7, -126, None))
    x = np.asarray(x)
    if x.dtype == np.float32:
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _kernels.bf16_round_f32(flat, out)
        return out.reshape(x.shape)
    return round_to_grid(x, 7, -126, None)


def absmax(x: np.ndarray) -> float:
    x = np.asarray(x)
    if x.dtype == np.float32:
        return float(_kernels.absmax_f32(np.ascontiguousarray(x).reshape(-1)))
    return float(np.max(np.abs(x), initial=0.0))


# -- delayed scaling -------------------------------------------------------

DEFAULT_HISTORY_LEN = 1024


@dataclass
class ScalingHistory:
    """Abs-max history for one tensor role; newest entry first."""

    format: Fp8Format
    length: int = DEFAULT_HISTORY_LEN
    margin: int = 0
    entries: deque = field(default=None)

    def __post_init__(self):
        init = [] if self.entries is None else list(self.entries)
        if any(v < 0 for v in init):
            raise ValueError("history entries must be non-negative")
        self.entries = deque(init, maxlen=self.length)

    def __len__(self):
        return len(self.entries)

    def empty(self) -> bool:
        return not self.entries

    def state(self) -> dict:
        return {"format": self.format.name, "length": self.length, "margin": self.margin,
                "entries": list(self.entries)}

    @classmethod
    def from_state(cls, state: dict) -> "ScalingHistory":
        return cls(FORMATS[state["format"]], state["length"], state["margin"], state["entries"])


def update_history(history: ScalingHistory, tensor_absmax: float) -> ScalingHistory:
    if not tensor_absmax >= 0:  # also rejects NaN
        raise ValueError(f"abs-max must be non-negative, got {tensor_absmax}")
    history.entries.appendleft(float(tensor_absmax))
    return history


def compute_scale(history: ScalingHistory) -> float:
    """``max_finite / (2**margin * max(history))``; 1.0 for an all-zero history."""
    if history.empty():
        raise ValueError("cannot compute a scale from an empty history")
    top = max(history.entries)
    if top == 0.0:
        return 1.0
    return history.format.max_finite / (2.0 ** history.margin * top)


def cast_delayed(x: np.ndarray, history: ScalingHistory) -> tuple[CastResult, float]:
    """Scale with the history, cast, then record this tensor's abs-max.

    A role seen for the first time is seeded from the current tensor, so the
    bootstrap cast is just-in-time and counts as that step's update.
    """
    if history.empty():
        update_history(history, absmax(x))
        scale = compute_scale(history)
        return quantize_scaled(x, scale, history.format), scale
    scale = compute_scale(history)
    res = quantize_scaled(x, scale, history.format)
    if math.isfinite(res.absmax):  # a non-finite tensor must not poison later scales
        update_history(history, res.absmax)
    return res, scale


def scaled_fp8_gemm(x: np.ndarray, y: np.ndarray, hist_x: ScalingHistory, hist_y: ScalingHistory,
                    quantize: bool = True, stats: Iterable | None = None) -> np.ndarray:
    """Delayed-scaled FP8 matmul ``x @ y`` (batched via numpy broadcasting).

    With ``quantize=False`` the cast is the identity and both scales are 1,
    which reproduces the plain matmul bit-for-bit.
    """
    if x.shape[-1] != y.shape[-2]:
        raise ValueError(f"inner dimensions differ: {x.shape} @ {y.shape}")
    if not quantize:
        update_history(hist_x, absmax(x))
        update_history(hist_y, absmax(y))
        return x @ y
    cx, sx = cast_delayed(x, hist_x)
    cy, sy = cast_delayed(y, hist_y)
    if stats is not None:
        for s, c in zip(stats, (cx, cy)):
            s.record(c)
    out = cx.values @ cy.values
    out /= out.dtype.type(sx * sy)
    return out
