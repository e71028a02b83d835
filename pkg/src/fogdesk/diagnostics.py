"""Outlier telemetry: kurtosis probes and the divergence monitor.

Kurtosis here is the uncentred statistic ``mean(x**4) / var(x**2)`` of a
feature vector, averaged over all (batch, position) rows of an activation
tensor. It is large when a few features dominate a row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fogdesk import _kernels
from fogdesk.tensor import no_grad

PROBES = ("ffn_second_input", "qkv", "block_output")
POPULATION = "population"
MOMENT_RATIO = "moment_ratio"

# relative size below which var(x**2) counts as zero
_DEGENERATE_RTOL = 1e-9


def kurtosis_rows(x: np.ndarray, mode: str = POPULATION) -> np.ndarray:
    """Kurtosis of every row of ``x`` (last axis = features), NaN where undefined.

    Moments are accumulated in float64 regardless of the input dtype.
    """
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise ValueError("kurtosis needs at least two features")
    if mode not in (POPULATION, MOMENT_RATIO):
        raise ValueError(f"unknown kurtosis mode {mode!r}")
    lead = x.shape[:-1]
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    if flat.dtype not in (np.float32, np.float64):
        flat = flat.astype(np.float64)
    mom = np.empty((flat.shape[0], 3))
    _kernels.row_square_moments(flat, mom)
    m2, m4, var2 = mom[:, 0], mom[:, 1], mom[:, 2]
    if mode == POPULATION:
        denom = var2
        bad = denom <= (_DEGENERATE_RTOL * m2) ** 2
    else:
        denom = m2 * m2
        bad = denom == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        k = m4 / denom
    return np.where(bad, np.nan, k).reshape(lead)


def kurtosis_vector(x, mode: str = POPULATION) -> float | None:
    """Kurtosis of one vector; ``None`` when ``var(x**2)`` vanishes."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise ValueError("kurtosis needs at least two features")
    k = float(kurtosis_rows(x[None, :], mode)[0])
    return None if math.isnan(k) else k


def kurtosis_tensor(X, mode: str = POPULATION, return_excluded: bool = False):
    """Mean per-row kurtosis over all leading positions of ``X``.

    Degenerate rows are left out of the mean; ``return_excluded`` also
    returns how many there were.
    """
    X = np.asarray(X)
    k = kurtosis_rows(X.reshape(-1, X.shape[-1]), mode)
    ok = ~np.isnan(k)
    if not ok.any():
        raise ValueError("every position is degenerate; kurtosis undefined")
    value = float(k[ok].mean())
    return (value, int((~ok).sum())) if return_excluded else value


@dataclass
class KurtosisRecord:
    step: int
    tokens_seen: int
    probe: str
    layer: int | str  # layer index or "mean"
    value: float | None  # None marks an undefined statistic
    excluded: int = 0

    def to_json(self) -> dict:
        return {"probe": self.probe, "layer": self.layer, "value": self.value, "excluded": self.excluded}


def records_from_sink(sink: dict, layers: int, step: int, tokens: int, mode: str = POPULATION):
    """Turn captured activations into records: per layer, then the cross-layer mean."""
    out = []
    for probe in PROBES:
        vals = []
        for layer in range(layers):
            arr = sink.get((probe, layer))
            if arr is None:
                continue
            try:
                v, n_bad = kurtosis_tensor(arr, mode, return_excluded=True)
            except ValueError:
                v, n_bad = None, int(np.prod(arr.shape[:-1]))
            out.append(KurtosisRecord(step, tokens, probe, layer, v, n_bad))
            if v is not None:
                vals.append(v)
        mean = float(np.mean(vals)) if vals else None
        out.append(KurtosisRecord(step, tokens, probe, "mean", mean))
    return out


def collect_probes(model, inputs, step: int = 0, tokens: int = 0, mode: str = POPULATION):
    """Run one gradient-free forward pass and return its kurtosis records."""
    sink = {}
    prev = model.probe_sink
    model.probe_sink = sink
    try:
        with no_grad():
            model.forward(inputs)
    finally:
        model.probe_sink = prev
    return records_from_sink(sink, model.config.layers, step, tokens, mode)


# -- divergence monitor -----------------------------------------------------------

CONSISTENT = "consistent"
WARNING = "warning"
DIVERGING = "diverging"


@dataclass(frozen=True)
class MonitorConfig:
    window: int = 200
    hop: int | None = None  # spacing of window evaluations; default window // 4
    warn_multiplier: float = 3.0
    diverge_multiplier: float = 10.0
    consecutive: int = 3
    z: float = 3.0  # the window slope is discounted by z standard errors
    rel_floor: float = 0.01  # growth below 1% of the level per window is noise

    @property
    def stride(self) -> int:
        return self.hop or max(1, self.window // 4)


@dataclass
class DivergenceVerdict:
    probe: str
    status: str
    growth_exponent: float  # power-law exponent of the latest window
    residual_score: float  # latest window growth over the fitted log-trend growth
    detected_at: float | None = None  # tokens at which "diverging" first held


def _slope(x, y):
    """Least-squares slope of y on x and its standard error."""
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        return 0.0, math.inf
    b = float(xc @ (y - y.mean())) / sxx
    resid = y - y.mean() - b * xc
    dof = max(len(x) - 2, 1)
    se = math.sqrt(float(resid @ resid) / dof / sxx)
    return b, se


def _window_ratio(logt, k, start, end, cfg: MonitorConfig) -> float:
    b_ref, _ = _slope(logt[:start], k[:start])
    lt, kw = logt[start:end], k[start:end]
    b_win, se = _slope(lt, kw)
    span = lt[-1] - lt[0]
    floor = cfg.rel_floor * float(np.mean(np.abs(k[:start]))) / span if span > 0 else math.inf
    lower = b_win - cfg.z * se
    return lower / max(b_ref, floor, 1e-300)


def divergence_score(series, config: MonitorConfig | None = None, probe: str = "qkv") -> DivergenceVerdict:
    """Judge a ``(tokens, kurtosis)`` series against a logarithmic growth trend.

    Trailing windows of ``window`` points are evaluated every ``hop`` points.
    Each window's slope against log(tokens) (discounted by ``z`` standard
    errors) is compared with the log-trend slope fitted on everything before
    the window. ``consecutive`` evaluations above ``diverge_multiplier`` make
    the run diverging (sticky); the latest ``consecutive`` above
    ``warn_multiplier`` give a warning.
    """
    cfg = config or MonitorConfig()
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be a sequence of (tokens, kurtosis) pairs")
    arr = arr[np.isfinite(arr[:, 1])]
    W = cfg.window
    if len(arr) < 2 * W:
        raise ValueError(f"need at least {2 * W} points, got {len(arr)}")
    t, k = arr[:, 0], arr[:, 1]
    if np.any(t <= 0):
        raise ValueError("token counts must be positive")
    logt = np.log(t)
    ends = list(range(2 * W, len(arr) + 1, cfg.stride))
    if ends[-1] != len(arr):
        ends.append(len(arr))
    run_div = run_warn = 0
    detected = None
    ratio = 0.0
    for end in ends:
        ratio = _window_ratio(logt, k, end - W, end, cfg)
        run_div = run_div + 1 if ratio > cfg.diverge_multiplier else 0
        run_warn = run_warn + 1 if ratio > cfg.warn_multiplier else 0
        if detected is None and run_div >= cfg.consecutive:
            detected = float(t[end - 1])
    if detected is not None:
        status = DIVERGING
    elif run_warn >= cfg.consecutive:
        status = WARNING
    else:
        status = CONSISTENT
    lt, kw = logt[-W:], k[-W:]
    growth = _slope(lt, np.log(kw))[0] if np.all(kw > 0) else math.nan
    return DivergenceVerdict(probe, status, float(growth), float(ratio), detected)
