"""Seed-matched precision comparisons and run summaries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from fogdesk.config import TrainConfig
from fogdesk.diagnostics import MonitorConfig, divergence_score
from fogdesk.trainer import COMPLETED, read_metrics, smoothed_final_loss, kurtosis_series, train

SMOOTH_STEPS = 100
PAIR = ("bf16", "fp8dpa")


@dataclass
class RunSummary:
    method: str
    status: str
    steps: int
    final_loss: float  # mean loss over the last SMOOTH_STEPS steps
    qkv_kurtosis: float  # mean cross-layer QKV kurtosis over the same steps
    verdict: str
    growth_exponent: float
    run_dir: str


def summarize_run(run_dir, method: str, monitor: MonitorConfig | None = None) -> RunSummary:
    records = read_metrics(run_dir)
    last = records[-1] if records else {}
    series = kurtosis_series(records, "qkv")
    qkv = float(np.mean([v for _, v in series[-SMOOTH_STEPS:]])) if series else math.nan
    try:
        v = divergence_score(series, monitor, probe="qkv")
        verdict, growth = v.status, v.growth_exponent
    except ValueError:
        verdict, growth = "insufficient-data", math.nan
    return RunSummary(method, last.get("status", "error"), last.get("step", 0),
                      smoothed_final_loss(records, SMOOTH_STEPS), qkv, verdict, growth, str(run_dir))


def compare(config: TrainConfig, out_dir, methods=PAIR, log=None) -> dict:
    """Train ``config`` once per precision method with shared seed and data, then report."""
    out_dir = Path(out_dir)
    rows, errors = [], {}
    for m in methods:
        run_dir = out_dir / m
        try:
            train(config.replace(precision=m), run_dir, log=log)
        except Exception as e:  # partial report: the other run still counts
            errors[m] = f"{type(e).__name__}: {e}"
        if (run_dir / "metrics.jsonl").exists():
            rows.append(summarize_run(run_dir, m))
        else:
            rows.append(RunSummary(m, "error", 0, math.nan, math.nan, "n/a", math.nan, str(run_dir)))
    report = {"runs": [asdict(r) for r in rows], "errors": errors}
    if len(rows) == 2:
        a, b = rows
        gap = abs(a.final_loss - b.final_loss)
        report["loss_gap"] = gap
        report["relative_gap"] = gap / a.final_loss if a.final_loss else math.nan
    report["all_completed"] = all(r.status == COMPLETED for r in rows)
    return report


def format_report(report: dict) -> str:
    head = f"{'method':<8} {'status':<10} {'steps':>6} {'final_loss':>11} {'qkv_kurt':>9} verdict"
    lines = [head]
    for r in report["runs"]:
        lines.append(f"{r['method']:<8} {r['status']:<10} {r['steps']:>6d} {r['final_loss']:>11.5f} "
                     f"{r['qkv_kurtosis']:>9.3f} {r['verdict']}")
    if "loss_gap" in report:
        lines.append(f"loss gap {report['loss_gap']:.5f} ({100 * report['relative_gap']:.3f}% relative)")
    for m, err in report.get("errors", {}).items():
        lines.append(f"{m}: {err}")
    return "\n".join(lines)
