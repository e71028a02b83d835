"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Runtime budgets are asserted where they are hard limits. The paired training
run has a 30 minute target which is reported, not asserted, as it depends on
the host.
"""

import math
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from fogdesk import functional as F
from fogdesk.compare import compare
from fogdesk.config import TrainConfig
from fogdesk.diagnostics import (CONSISTENT, DIVERGING, MonitorConfig, divergence_score, kurtosis_tensor,
                                 kurtosis_vector)
from fogdesk.fp8 import (E4M3, E5M2, ScalingHistory, cast_delayed, compute_scale, decode_fp8, encode_fp8,
                         update_history)
from fogdesk.models import (ARCHITECTURES, ModelConfig, build_model, effective_softmax_scale, get_architecture,
                            param_count)
from fogdesk.precision import PrecisionState, policy_for
from fogdesk.tensor import Tensor
from fogdesk.trainer import COMPLETED, Trainer, read_metrics
from gradcheck import check_op

sys.path.insert(0, str(__import__("pathlib").Path(__file__).resolve().parents[1] / "scripts"))
from paired_run import PAIRED_DEFAULTS  # noqa: E402


@contextmanager
def criterion(capsys, number, title, budget=None):
    start = time.perf_counter()
    status, note = "PASS", ""
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget is not None and elapsed >= budget:
            status, note = "FAIL", f" over the {budget:g} s budget"
            raise AssertionError(f"criterion {number} took {elapsed:.1f} s, budget {budget} s")
    except BaseException:
        status = "FAIL"
        raise
    finally:
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"\n[{status}] criterion {number:>2}: {title} ({elapsed:.2f} s){note}")


# 1 ------------------------------------------------------------------------------------


def test_c01_codec_exhaustive(capsys):
    with criterion(capsys, 1, "FP8 codec roundtrips all 512 codes", budget=1.0):
        for fmt in (E4M3, E5M2):
            for code in range(256):
                v = decode_fp8(code, fmt)
                back = encode_fp8(v, fmt)
                if math.isnan(v):
                    assert fmt.is_nan_code(code) and fmt.is_nan_code(back)
                elif math.isinf(v):
                    # casts saturate, so infinities encode to the largest finite code of that sign
                    assert fmt is E5M2 and back == (code & 0x80) | fmt.max_code
                else:
                    assert back == code, (fmt.name, code, back)
        assert E4M3.max_finite == 448.0 and E5M2.max_finite == 57344.0
        assert decode_fp8(0x7E, E4M3) == 448.0 and decode_fp8(0x7B, E5M2) == 57344.0


# 2 ------------------------------------------------------------------------------------


def test_c02_delayed_scaling(capsys):
    with criterion(capsys, 2, "delayed scaling formula, history update and bootstrap", budget=1.0):
        r = np.random.default_rng(0)
        for trial in range(200):
            fmt = (E4M3, E5M2)[trial % 2]
            length, margin = int(r.integers(1, 40)), int(r.integers(0, 4))
            h = ScalingHistory(fmt, length=length, margin=margin)
            values = list(r.exponential(r.uniform(0.01, 100), int(r.integers(1, 80))))
            if trial % 7 == 0:
                values = [0.0] * len(values)
            for v in values:
                update_history(h, float(v))
            window = values[::-1][:length]
            assert list(h.entries) == window
            top = max(window)
            assert compute_scale(h) == (1.0 if top == 0 else fmt.max_finite / (2.0 ** margin * top))
        h = ScalingHistory(E4M3, length=2)
        for v in (8.0, 1.0, 2.0):
            update_history(h, v)
        assert compute_scale(h) == 448.0 / 2.0  # 8 dropped at the length boundary
        boot = ScalingHistory(E4M3)
        _, s = cast_delayed(np.array([3.0, -7.0], np.float32), boot)
        assert s == 64.0 and list(boot.entries) == [7.0]


# 3 ------------------------------------------------------------------------------------


def _attn_probs(q, k, gain, scale):
    s = F.matmul(F.rmsnorm(Tensor(q), gain), F.rmsnorm(Tensor(k), gain).swapaxes(-1, -2))
    return F.softmax_rows(s, "causal", scale=scale).data


def test_c03_softmax_trick(capsys):
    with criterion(capsys, 3, "softmax-scale folding identity and 0.17678"):
        r = np.random.default_rng(3)
        d, g0 = 128, math.sqrt(2.0)
        q, k = r.normal(size=(4, 32, d)), r.normal(size=(4, 32, d))
        for dtype, tol in ((np.float32, 1e-6), (np.float64, None)):
            a = _attn_probs(q.astype(dtype), k.astype(dtype), np.full(d, g0, dtype), 1 / math.sqrt(d))
            b = _attn_probs(q.astype(dtype), k.astype(dtype), None, effective_softmax_scale(g0, d))
            if tol is not None:
                assert np.abs(a - b).max() <= tol
            else:
                # 64-bit: exact for power-of-two gains, otherwise one rounding of the folded scale
                assert np.abs(a - b).max() <= 1e-15
                g2 = 2.0
                a2 = _attn_probs(q, k, np.full(d, g2), 1 / math.sqrt(d))
                b2 = _attn_probs(q, k, None, effective_softmax_scale(g2, d))
                assert np.array_equal(a2, b2)
        assert abs(effective_softmax_scale(g0, 128) - 0.17678) <= 1e-5


# 4 ------------------------------------------------------------------------------------

_TOY = ModelConfig(layers=2, hidden=16, ffn_hidden=16, heads=2, qk_groups=1, init_std=0.3, context=8)


def test_c04_gradient_checks(capsys):
    from test_autograd import ELEMENTWISE

    with criterion(capsys, 4, "finite-difference gradients for ops and all 7 architectures", budget=120.0):
        for name, (op, inputs) in ELEMENTWISE.items():
            check_op(op, *inputs)
        r = np.random.default_rng(11)
        for name in ARCHITECTURES:
            model = build_model(name, _TOY, seed=5, dtype=np.float64)
            ids, tgt = r.integers(0, 256, (2, 6)), r.integers(0, 256, (2, 6))
            model.loss(ids, tgt).backward()
            for pname, p in model.params.items():
                v = r.normal(size=p.shape)
                analytic = float(np.sum(p.grad * v))
                old = p.data.copy()
                p.data[...] = old + 1e-5 * v
                lp = float(model.loss(ids, tgt).data)
                p.data[...] = old - 1e-5 * v
                lm = float(model.loss(ids, tgt).data)
                p.data[...] = old
                numeric = (lp - lm) / 2e-5
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                assert err <= 1e-3, (name, pname, err)


# 5 ------------------------------------------------------------------------------------


def test_c05_kurtosis_oracles(capsys):
    with criterion(capsys, 5, "kurtosis oracles", budget=30.0):
        assert abs(kurtosis_vector([1, 1, 1, 3]) - 1.75) < 1e-12
        r = np.random.default_rng(5)
        for _ in range(200):
            N, C, D = (int(r.integers(1, 5)), int(r.integers(1, 5)), int(r.integers(2, 17)))
            X = r.normal(size=(N, C, D))
            loops = []
            for row in X.reshape(-1, D):
                sq = row * row
                loops.append(np.mean(sq * sq) / np.mean((sq - sq.mean()) ** 2))
            assert kurtosis_tensor(X) == pytest.approx(np.mean(loops), rel=1e-12)
            alpha = float(r.uniform(1e-3, 1e3)) * (1 if r.random() < 0.5 else -1)
            assert kurtosis_tensor(alpha * X) == pytest.approx(kurtosis_tensor(X), rel=1e-9)
        assert abs(kurtosis_vector(r.normal(size=1_000_000)) - 1.5) <= 0.05


# 6 ------------------------------------------------------------------------------------


def test_c06_precision_routing(capsys):
    with criterion(capsys, 6, "FP8 vs FP8DPA routing, output head never FP8"):
        r = np.random.default_rng(0)
        ids, tgt = r.integers(0, 256, (2, 8)), r.integers(0, 256, (2, 8))
        L = _TOY.layers
        for method, attn in (("fp8", "bf16"), ("fp8dpa", "fp8")):
            state = PrecisionState(policy_for(method))
            build_model("fog-opt", _TOY, precision=state).loss(ids, tgt).backward()
            c = state.calls
            for kind in ("attn_scores", "attn_values"):
                for d in ("fwd", "bwd"):
                    assert c[(kind, attn, d)] == L
                assert sum(v for (k, p, _), v in c.items() if k == kind and p != attn) == 0
            assert c[("linear", "fp8", "fwd")] == 4 * L
            assert {p for (k, p, _) in c if k == "output"} == {"bf16"}


# 7 ------------------------------------------------------------------------------------


def test_c07_parameter_matching(capsys):
    with criterion(capsys, 7, "non-GLU FOG parameter counts within 0.5% of the GLU baseline"):
        c = ModelConfig()
        base = param_count(get_architecture("llama"), c)["total"]
        for name in ("fog-max", "fog-opt", "fog-flash"):
            n = param_count(get_architecture(name), c)["total"]
            assert abs(n - base) / base < 0.005, (name, n, base)


# 8 ------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c08_paired_training(capsys, big_corpus_path, tmp_path):
    assert big_corpus_path.stat().st_size >= 1_000_000
    cfg = TrainConfig(**PAIRED_DEFAULTS, corpus=str(big_corpus_path))
    start = time.perf_counter()
    with criterion(capsys, 8, "paired bf16 / fp8dpa desk run, both complete, gap <= 2%"):
        report = compare(cfg, tmp_path / "paired")
        with capsys.disabled():
            for r in report["runs"]:
                print(f"\n    {r['method']}: {r['status']} after {r['steps']} steps, "
                      f"smoothed loss {r['final_loss']:.4f}, qkv kurtosis {r['qkv_kurtosis']:.3f} ({r['verdict']})")
            print(f"    relative gap {100 * report['relative_gap']:.3f}%, "
                  f"wall time {(time.perf_counter() - start) / 60:.1f} min (target < 30 min)")
        assert not report["errors"], report["errors"]
        assert all(r["status"] == COMPLETED and r["steps"] == cfg.total_steps for r in report["runs"])
        assert report["relative_gap"] <= 0.02


# 9 ------------------------------------------------------------------------------------


def test_c09_divergence_monitor(capsys):
    with criterion(capsys, 9, "divergence monitor null vs change point, deterministic"):
        W, n, t0 = 200, 1200, 600
        t = np.arange(1, n + 1) * 1024.0
        i = np.arange(n)
        for seed in range(5):
            noise = np.random.default_rng(seed).normal(0, 0.05, n)
            null = 1.5 + 0.3 * np.log(t) + noise
            jump = null + np.where(i >= t0, 0.1 * (np.exp((i - t0) / 60.0) - 1.0), 0.0)
            v0 = divergence_score(np.c_[t, null], MonitorConfig(window=W))
            v1 = divergence_score(np.c_[t, jump], MonitorConfig(window=W))
            assert v0.status == CONSISTENT
            assert v1.status == DIVERGING and t[t0] < v1.detected_at <= t[t0 + 2 * W]
            assert divergence_score(np.c_[t, jump], MonitorConfig(window=W)) == v1


# 10 -----------------------------------------------------------------------------------


def test_c10_resume_exactness(capsys, tmp_path, corpus_path):
    with criterion(capsys, 10, "mid-run resume is bit-identical, including FP8 histories"):
        cfg = TrainConfig(arch="fog-opt", layers=2, hidden=32, ffn_hidden=64, heads=2, qk_groups=1, total_steps=16,
                          batch_size=2, context=16, warmup_steps=2, cooldown_steps=6, precision="fp8dpa",
                          checkpoint_every=8, corpus=str(corpus_path))
        Trainer(cfg, tmp_path / "full").run()
        Trainer(cfg, tmp_path / "half").run(stop_at=8)
        Trainer(cfg, tmp_path / "resumed", resume=tmp_path / "half" / "checkpoints" / "step_000008.ckpt").run()
        full = [r["loss"] for r in read_metrics(tmp_path / "full")]
        resumed = [r["loss"] for r in read_metrics(tmp_path / "resumed")]
        assert len(resumed) == 8 and resumed == full[8:]
        assert read_metrics(tmp_path / "resumed") == read_metrics(tmp_path / "full")[8:]


# 11 -----------------------------------------------------------------------------------


def test_c11_frozen_gain_contract(capsys, tmp_path, corpus_path):
    with criterion(capsys, 11, "frozen FOG QK regularisers unchanged, OP gains trained"):
        base = dict(layers=2, hidden=32, ffn_hidden=64, heads=2, qk_groups=1, total_steps=10, batch_size=2,
                    context=16, warmup_steps=2, cooldown_steps=4, precision="bf16", corpus=str(corpus_path))
        for arch in ("fog-max", "fog-opt", "fog-flash"):
            tr = Trainer(TrainConfig(arch=arch, **base), tmp_path / arch)
            frozen = {k: v.copy() for k, v in tr.model.buffers.items() if ".attn." in k}
            assert frozen
            tr.run()
            for k, v in frozen.items():
                assert v.tobytes() == tr.model.buffers[k].tobytes(), (arch, k)
        tr = Trainer(TrainConfig(arch="op", **base), tmp_path / "op")
        names = [k for k in tr.model.params if k.endswith(("q_norm.gain", "k_norm.gain"))]
        init = {k: tr.model.params[k].data.copy() for k in names}
        tr.run()
        assert names and all(not np.array_equal(init[k], tr.model.params[k].data) for k in names)
