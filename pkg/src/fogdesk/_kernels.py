"""Compiled inner loops for the float32 hot paths.

Everything here operates on flat contiguous float32 buffers and is
bit-exact with the generic numpy code in :mod:`fogdesk.fp8`; the test suite
checks the two against each other.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def cast_scaled_f32(x, scale, mbits, emin, max_bits, sub_table, out):
    """Round ``x * scale`` onto a small-float grid, writing into ``out``.

    Returns ``(absmax(x), n_saturated, n_flushed)``. Rounding is
    round-to-nearest-even, magnitudes above the largest finite value saturate,
    NaN stays NaN. ``sub_table[q]`` holds the float32 bit pattern of
    ``q * 2**(emin - mbits)`` for the subnormal range.
    """
    shift = 23 - mbits
    half = (1 << (shift - 1)) - 1
    mask = 0xFFFFFFFF ^ ((1 << shift) - 1)
    min_normal = (127 + emin) << 23
    sub_base = 150 + emin - mbits
    buf = np.empty(1, np.float32)
    bu = buf.view(np.uint32)
    ou = out.view(np.uint32)
    amax = np.float32(0.0)
    over = 0
    under = 0
    s32 = np.float32(scale)
    for i in range(x.size):
        xi = x[i]
        ax = abs(xi)
        if ax > amax:
            amax = ax
        buf[0] = xi * s32
        b = np.int64(bu[0])
        sign = b & 0x80000000
        a = b & 0x7FFFFFFF
        if a > 0x7F800000:
            r = 0x7FC00000
        elif a >= min_normal:
            r = (a + half + ((a >> shift) & 1)) & mask
            if r > max_bits:
                r = max_bits
                over += 1
        elif a == 0:
            r = 0
        else:
            e = a >> 23
            man = a & 0x7FFFFF
            if e > 0:
                man |= 0x800000
            else:
                e = 1
            sh = sub_base - e
            if sh >= 25:
                q = 0
            else:
                q = (man + (1 << (sh - 1)) - 1 + ((man >> sh) & 1)) >> sh
            r = sub_table[q]
            if q == 0:
                under += 1
        ou[i] = np.uint32(r | sign)
    return amax, over, under


@numba.njit(cache=True, nogil=True)
def bf16_round_f32(x, out):
    xu = x.view(np.uint32)
    ou = out.view(np.uint32)
    for i in range(x.size):
        b = np.int64(xu[i])
        if (b & 0x7FFFFFFF) > 0x7F800000:
            ou[i] = np.uint32(b | 0x00400000)
        else:
            ou[i] = np.uint32(((b + 0x7FFF + ((b >> 16) & 1)) & 0xFFFF0000) & 0xFFFFFFFF)


@numba.njit(cache=True, nogil=True)
def absmax_f32(x):
    amax = np.float32(0.0)
    for i in range(x.size):
        a = abs(x[i])
        if a > amax:
            amax = a
    return amax


@numba.njit(cache=True, nogil=True)
def causal_softmax_f32(s, scale, out):
    """Row softmax of ``scale * s`` over the last axis with a causal mask.

    ``s`` has shape (B, C, C) and row ``i`` only sees columns ``0..i``.
    Masked entries are written as exact zeros.
    """
    nb, nq, nk = s.shape
    sc = np.float32(scale)
    for b in range(nb):
        for i in range(nq):
            lim = i + 1 + (nk - nq)
            if lim > nk:
                lim = nk
            m = np.float32(-np.inf)
            for j in range(lim):
                v = s[b, i, j] * sc
                if v > m:
                    m = v
            tot = np.float32(0.0)
            for j in range(lim):
                e = np.exp(s[b, i, j] * sc - m)
                out[b, i, j] = e
                tot += e
            inv = np.float32(1.0) / tot
            for j in range(lim):
                out[b, i, j] *= inv
            for j in range(lim, nk):
                out[b, i, j] = 0.0


@numba.njit(cache=True, nogil=True)
def softmax_backward_f32(p, g, scale, out):
    """``out = scale * p * (g - sum(g * p, -1))`` for (B, C, C) inputs."""
    nb, nq, nk = p.shape
    sc = np.float32(scale)
    for b in range(nb):
        for i in range(nq):
            dot = np.float32(0.0)
            for j in range(nk):
                dot += g[b, i, j] * p[b, i, j]
            for j in range(nk):
                out[b, i, j] = sc * p[b, i, j] * (g[b, i, j] - dot)



@numba.njit(cache=True, nogil=True)
def row_square_moments(x, out):
    """Per row of a 2-D array: ``(mean(x**2), mean(x**4), var(x**2))`` in float64.

    The variance uses a second pass around the mean for accuracy.
    """
    n, d = x.shape
    for r in range(n):
        s2 = 0.0
        s4 = 0.0
        for j in range(d):
            v = np.float64(x[r, j])
            q = v * v
            s2 += q
            s4 += q * q
        m2 = s2 / d
        acc = 0.0
        for j in range(d):
            v = np.float64(x[r, j])
            dv = v * v - m2
            acc += dv * dv
        out[r, 0] = m2
        out[r, 1] = s4 / d
        out[r, 2] = acc / d
