import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogdesk.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fogdesk.config import ConfigError, TrainConfig, dump_config, parse_config_text
from fogdesk.data import ByteCorpus, load_corpus
from fogdesk.optim import AdamWState, adamw_step, clip_gradients, global_norm, lr_at_step
from fogdesk.tensor import Tensor
from fogdesk.trainer import COMPLETED, DIVERGED, FINAL_CHECKPOINT, Trainer, read_metrics

# -- schedule -----------------------------------------------------------------------------

S = dict(total_steps=1000, peak_lr=1e-3, warmup_steps=100, cooldown_steps=400, min_lr=1e-8)


def lr(t, **kw):
    a = {**S, **kw}
    return lr_at_step(t, a["total_steps"], a["peak_lr"], a["warmup_steps"], a["cooldown_steps"], a["min_lr"])


def test_schedule_examples():
    assert lr(50) == pytest.approx(0.5e-3)
    assert lr(1000) == pytest.approx(1e-8)
    assert lr(600 + 100) == pytest.approx(1e-8 + 0.5 * (1e-3 - 1e-8))  # a quarter into cooldown
    assert lr(0) == 0.0
    assert lr(300) == 1e-3


def test_schedule_continuous_at_boundaries():
    assert lr(100) == lr(100 - 1e-9 * 0) == 1e-3
    assert abs(lr(99) + 1e-5 - lr(100)) < 1e-12
    assert lr(600) == 1e-3
    assert abs(lr(601) - 1e-3) < 1e-4


def test_schedule_range_errors():
    with pytest.raises(ValueError):
        lr(-1)
    with pytest.raises(ValueError):
        lr(1001)


@given(st.integers(0, 1000))
def test_schedule_is_bounded(t):
    assert 0.0 <= lr(t) <= 1e-3
    if t >= 100:
        assert lr(t) >= 1e-8


@given(st.integers(600, 999))
def test_cooldown_is_monotone(t):
    assert lr(t + 1) <= lr(t)


# -- optimizer ----------------------------------------------------------------------------


def test_zero_gradient_no_decay_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), lr=1e-2, weight_decay=0.0)
    assert p["w"].tolist() == [1.0, -2.0]


def test_first_step_magnitude_is_lr():
    p = {"w": np.array([0.3])}
    adamw_step(p, {"w": np.array([1.0])}, AdamWState(), lr=1e-2, eps=0.0)
    assert p["w"][0] == pytest.approx(0.3 - 1e-2, abs=1e-15)


def test_decoupled_decay_geometric_and_exemptions():
    p = {"w": np.array([2.0, 4.0]), "n.gain": np.array([1.5])}
    st_ = AdamWState()
    for _ in range(5):
        adamw_step(p, {"w": np.zeros(2), "n.gain": np.zeros(1)}, st_, lr=0.1, weight_decay=0.1,
                   exempt=lambda n: n.endswith(".gain"))
    np.testing.assert_allclose(p["w"], np.array([2.0, 4.0]) * 0.99 ** 5, rtol=1e-13)
    assert p["n.gain"][0] == 1.5
    assert st_.step == 5


def test_nan_gradient_aborts():
    with pytest.raises(FloatingPointError, match="w"):
        adamw_step({"w": np.ones(2)}, {"w": np.array([np.nan, 1.0])}, AdamWState(), lr=1e-3)


def test_clip_examples():
    g = [np.array([2.0, 0.0])]
    _, n = clip_gradients(g, 1.0)
    assert n == 2.0 and g[0].tolist() == [1.0, 0.0]
    g = [np.array([0.3, 0.4])]
    _, n = clip_gradients(g, 1.0)
    assert n == pytest.approx(0.5) and g[0].tolist() == [0.3, 0.4]
    with pytest.raises(FloatingPointError):
        clip_gradients([np.array([np.inf])], 1.0)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 10.0))
def test_clip_postcondition(seed, max_norm):
    r = np.random.default_rng(seed)
    g = [r.normal(size=(3, 4)) * r.uniform(0.01, 5), r.normal(size=7)]
    pre = global_norm(g)
    _, n = clip_gradients(g, max_norm)
    assert n == pytest.approx(pre)
    assert global_norm(g) == pytest.approx(min(pre, max_norm), abs=1e-6)


# -- corpus -----------------------------------------------------------------------------


def test_exact_size_file_gives_one_batch(tmp_path):
    N, T = 3, 5
    data = bytes(range(65, 65 + N * T + 1))
    f = tmp_path / "c.txt"
    f.write_bytes(data)
    c = ByteCorpus(f, T, N)
    assert c.batches_per_epoch == 1
    x, y = c.batch(0)
    assert x.shape == y.shape == (N, T)
    assert np.array_equal(x[:, 1:], y[:, :-1])
    starts = sorted(int(r[0]) for r in x)
    assert starts == [65, 70, 75]


def test_same_seed_same_stream(corpus_path):
    a, b = load_corpus(corpus_path, 32, 4, seed=7), load_corpus(corpus_path, 32, 4, seed=7)
    for _ in range(100):
        (xa, ya), (xb, yb) = next(a), next(b)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    c = ByteCorpus(corpus_path, 32, 4, seed=8)
    assert not np.array_equal(c.batch(0)[0], ByteCorpus(corpus_path, 32, 4, seed=7).batch(0)[0])


def test_token_histogram_matches_bytes(tmp_path):
    N, T = 4, 8
    raw = np.random.default_rng(0).integers(32, 127, N * T * 5 + 1).astype(np.uint8).tobytes()
    f = tmp_path / "c.txt"
    f.write_bytes(raw)
    c = ByteCorpus(f, T, N, seed=3)
    seen = np.concatenate([c.batch(k)[0].ravel() for k in range(c.batches_per_epoch)])
    assert np.array_equal(np.bincount(seen, minlength=256),
                          np.bincount(np.frombuffer(raw[:-1], np.uint8), minlength=256))
    assert seen.max() < 256


def test_corpus_errors(tmp_path):
    f = tmp_path / "small.txt"
    f.write_bytes(b"abc")
    with pytest.raises(ValueError, match="need at least"):
        ByteCorpus(f, 8, 2)
    with pytest.raises(OSError):
        ByteCorpus(tmp_path / "missing.txt", 8, 2)


# -- config -------------------------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ConfigError) as e:
        TrainConfig(total_steps=10, warmup_steps=8, cooldown_steps=4)
    assert e.value.key == "warmup_steps"
    with pytest.raises(ConfigError):
        TrainConfig(min_lr=1.0, peak_lr=0.1)
    with pytest.raises(ConfigError):
        TrainConfig(precision="fp4")
    with pytest.raises(ConfigError):
        TrainConfig(arch="gpt2")


def test_config_file_roundtrip():
    cfg = TrainConfig(arch="op", precision="fp8dpa", softmax_scale=0.25, tied_embeddings=False, corpus="x.txt")
    again = TrainConfig.from_dict(parse_config_text(dump_config(cfg)))
    assert again == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as e:
        parse_config_text("arch = op\nlearning_rate = 3\n")
    assert e.value.key == "learning_rate"
    with pytest.raises(ConfigError):
        parse_config_text("total_steps = many\n")
    assert parse_config_text("# comment\n total_steps = 7  # trailing\n") == {"total_steps": 7}


# -- training -----------------------------------------------------------------------------


def losses(run_dir):
    return [r["loss"] for r in read_metrics(run_dir)]


def test_smoke_run(tiny_config, tmp_path):
    result = Trainer(tiny_config(), tmp_path / "run").run()
    assert result.status == COMPLETED and result.steps == 10
    recs = read_metrics(tmp_path / "run")
    assert len(recs) == 10
    assert all(math.isfinite(r["loss"]) for r in recs)
    assert recs[-1]["status"] == COMPLETED
    assert {"step", "tokens", "lr", "loss", "grad_norm_preclip", "kurtosis", "casts"} <= set(recs[0])
    assert len(recs[0]["kurtosis"]) == 3 * (2 + 1)
    assert recs[-1]["tokens"] == 10 * 2 * 16
    assert (tmp_path / "run" / FINAL_CHECKPOINT).exists()


def test_loss_decreases(tiny_config, tmp_path):
    result = Trainer(tiny_config(total_steps=60, warmup_steps=5, cooldown_steps=10, peak_lr=1e-2),
                     tmp_path / "run").run()
    ls = losses(tmp_path / "run")
    assert result.status == COMPLETED
    assert np.mean(ls[-10:]) < np.mean(ls[:5]) - 0.5


@pytest.mark.parametrize("precision", ["fp32", "fp8dpa"])
def test_runs_are_deterministic(tiny_config, tmp_path, precision):
    cfg = tiny_config(precision=precision)
    Trainer(cfg, tmp_path / "a").run()
    Trainer(cfg, tmp_path / "b").run()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


@pytest.mark.parametrize("precision", ["bf16", "fp8", "fp8dpa"])
def test_resume_is_bit_exact(tiny_config, tmp_path, precision):
    cfg = tiny_config(precision=precision, checkpoint_every=5)
    Trainer(cfg, tmp_path / "full").run()
    Trainer(cfg, tmp_path / "part").run(stop_at=5)
    ckpt = tmp_path / "part" / "checkpoints" / "step_000005.ckpt"
    Trainer(cfg, tmp_path / "resumed", resume=ckpt).run()
    full = read_metrics(tmp_path / "full")
    resumed = read_metrics(tmp_path / "resumed")
    assert [r["step"] for r in resumed] == [6, 7, 8, 9, 10]
    assert resumed == full[5:]


def test_resume_into_same_directory_truncates(tiny_config, tmp_path):
    cfg = tiny_config(precision="fp8dpa", checkpoint_every=4)
    Trainer(cfg, tmp_path / "full").run()
    Trainer(cfg, tmp_path / "run").run()
    Trainer(cfg, tmp_path / "run", resume=tmp_path / "run" / "checkpoints" / "step_000004.ckpt").run()
    assert (tmp_path / "run" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()


def test_checkpoint_restores_scaling_histories(tiny_config, tmp_path):
    cfg = tiny_config(precision="fp8dpa")
    a = Trainer(cfg, tmp_path / "a")
    a.run(stop_at=3)
    a.save(tmp_path / "x.ckpt")
    b = Trainer(cfg, tmp_path / "b", resume=tmp_path / "x.ckpt")
    assert b.precision.state() == a.precision.state()
    assert len(b.precision.histories) > 0
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


def test_probes_do_not_perturb_training(tiny_config, tmp_path):
    Trainer(tiny_config(precision="fp8dpa", probe_stride=1), tmp_path / "on").run()
    Trainer(tiny_config(precision="fp8dpa", probe_stride=1000), tmp_path / "off").run()
    assert losses(tmp_path / "on") == losses(tmp_path / "off")
    assert read_metrics(tmp_path / "off")[1]["kurtosis"] == []


def test_explosion_halts_as_diverged(tiny_config, tmp_path):
    result = Trainer(tiny_config(explosion_factor=0.5), tmp_path / "run").run()
    assert result.status == DIVERGED and result.steps == 2
    recs = read_metrics(tmp_path / "run")
    assert len(recs) == 2 and recs[-1]["status"] == DIVERGED
    assert "trailing minimum" in recs[-1]["halt_reason"]


def test_non_finite_loss_halts(tiny_config, tmp_path):
    tr = Trainer(tiny_config(), tmp_path / "run")
    real = tr.model.loss
    calls = []

    def flaky(ids, tgt):
        calls.append(1)
        out = real(ids, tgt)
        return Tensor(np.float32(np.nan)) if len(calls) == 3 else out

    tr.model.loss = flaky
    result = tr.run()
    assert result.status == DIVERGED and result.steps == 3
    last = read_metrics(tmp_path / "run")[-1]
    assert last["loss"] is None and last["halt_reason"] == "non-finite loss"


def test_frozen_gains_untouched(tiny_config, tmp_path):
    for arch in ("fog-opt", "fog-max", "fog-flash"):
        tr = Trainer(tiny_config(arch=arch, precision="fp8dpa"), tmp_path / arch)
        before = {k: v.copy() for k, v in tr.model.buffers.items()}
        tr.run()
        assert before and all(np.array_equal(before[k], tr.model.buffers[k]) for k in before)
    tr = Trainer(tiny_config(arch="op"), tmp_path / "op")
    init = tr.model.params["blocks.0.attn.q_norm.gain"].data.copy()
    tr.run()
    assert not np.array_equal(init, tr.model.params["blocks.0.attn.q_norm.gain"].data)


def test_gains_are_not_decayed(tiny_config, tmp_path):
    tr = Trainer(tiny_config(peak_lr=0.0, min_lr=0.0), tmp_path / "run")
    before = {k: p.data.copy() for k, p in tr.model.params.items()}
    tr.run()
    for k, p in tr.model.params.items():
        assert np.array_equal(before[k], p.data)  # lr 0: neither update nor decay


def test_decay_follows_cooldown_when_enabled(tiny_config, tmp_path):
    tr = Trainer(tiny_config(decay_in_cooldown=True), tmp_path / "run")
    assert tr.decay_scale(5, tr.lr(5)) == 1.0
    assert tr.decay_scale(8, tr.lr(8)) == pytest.approx(tr.lr(8) / 3e-3)


# -- checkpoint container -------------------------------------------------------------------


def test_checkpoint_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(1.5)}
    save_checkpoint(tmp_path / "c.ckpt", {"k": [1, 2]}, arrays)
    meta, back = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"k": [1, 2]}
    assert np.array_equal(back["a"], arrays["a"]) and back["a"].dtype == np.float32
    assert back["b"].shape == ()


def test_checkpoint_refuses_other_versions(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {}, {"a": np.zeros(2)})
    raw = bytearray((tmp_path / "c.ckpt").read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_metrics_are_json_lines(tiny_config, tmp_path):
    Trainer(tiny_config(total_steps=6, warmup_steps=1, cooldown_steps=2), tmp_path / "r").run()
    for line in (tmp_path / "r" / "metrics.jsonl").read_text().splitlines():
        json.loads(line)
