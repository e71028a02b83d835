"""Desk-scale training loop.

One ``Trainer`` owns the model, optimizer, scaling histories and data
position. Every step appends one JSON line to ``metrics.jsonl``; the last
line's ``status`` is ``completed`` or ``diverged`` when the run ends.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fogdesk import diagnostics
from fogdesk.checkpoint import load_checkpoint, save_checkpoint
from fogdesk.config import TrainConfig, dump_config
from fogdesk.data import ByteCorpus
from fogdesk.models import build_model, no_decay
from fogdesk.optim import AdamW, AdamWState, clip_gradients, lr_at_step
from fogdesk.precision import PrecisionState, policy_for

RUNNING = "running"
COMPLETED = "completed"
DIVERGED = "diverged"

METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "config.txt"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class RunResult:
    status: str
    steps: int
    out_dir: Path
    final_loss: float | None
    reason: str = ""


def _json_float(x: float):
    return x if math.isfinite(x) else None


class Trainer:
    def __init__(self, config: TrainConfig, out_dir, resume=None, corpus: ByteCorpus | None = None):
        config.validate()
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / CONFIG_FILE).write_text(dump_config(config), encoding="utf-8")
        self.precision = PrecisionState(policy_for(config.precision), config.history_len, config.margin)
        self.model = build_model(config.arch, config.model_config(), seed=config.seed, precision=self.precision)
        self.corpus = corpus or ByteCorpus(config.corpus, config.context, config.batch_size, config.seed)
        self.optimizer = AdamW(config.peak_lr, (config.beta1, config.beta2), config.adam_eps,
                               config.weight_decay, exempt=no_decay)
        self.step = 0
        self.recent_losses = deque(maxlen=config.explosion_window)
        self.status = RUNNING
        self.last_loss = None
        if resume is not None:
            self.load(resume)
        self._truncate_metrics()

    # -- schedule ------------------------------------------------------------------

    def lr(self, t: int) -> float:
        c = self.config
        return lr_at_step(t, c.total_steps, c.peak_lr, c.warmup_steps, c.cooldown_steps, c.min_lr)

    def decay_scale(self, t: int, lr: float) -> float:
        c = self.config
        if c.decay_in_cooldown and t > c.total_steps - c.cooldown_steps and c.peak_lr > 0:
            return lr / c.peak_lr
        return 1.0

    # -- one step --------------------------------------------------------------------

    def train_step(self) -> dict:
        c = self.config
        t = self.step + 1
        lr = self.lr(t)
        inputs, targets = self.corpus.batch(self.step)
        probe = self.step % c.probe_stride == 0
        self.precision.reset_stats()
        self.model.probe_sink = {} if probe else None
        try:
            loss = self.model.loss(inputs, targets)
        finally:
            sink, self.model.probe_sink = self.model.probe_sink, None
        loss_val = float(loss.data)
        tokens = t * c.batch_size * c.context
        record = {"step": t, "tokens": tokens, "lr": lr, "loss": _json_float(loss_val)}
        record["kurtosis"] = [r.to_json() for r in diagnostics.records_from_sink(sink, c.layers, t, tokens)] \
            if sink is not None else []

        reason = ""
        grad_norm = math.nan
        if not math.isfinite(loss_val):
            reason = "non-finite loss"
        else:
            loss.backward()
            params = self.model.params
            grads = [p.grad for p in params.values()]
            try:
                _, grad_norm = clip_gradients(grads, c.grad_clip)
                self.optimizer.step({k: p.data for k, p in params.items()},
                                    {k: p.grad for k, p in params.items()}, lr, self.decay_scale(t, lr))
            except FloatingPointError as e:
                reason = str(e)
            for p in params.values():
                p.grad = None
            if not reason and self.recent_losses and loss_val > c.explosion_factor * min(self.recent_losses):
                reason = f"loss {loss_val:.4f} above {c.explosion_factor}x trailing minimum {min(self.recent_losses):.4f}"
        record["grad_norm_preclip"] = _json_float(grad_norm)
        record["casts"] = self._cast_summary()
        self.step = t
        self.last_loss = loss_val
        if reason:
            self.status = DIVERGED
            record["halt_reason"] = reason
        else:
            self.recent_losses.append(loss_val)
            if t == c.total_steps:
                self.status = COMPLETED
        record["status"] = self.status
        return record

    def _cast_summary(self) -> dict:
        stats = self.precision.stats
        return {
            "overflow": int(sum(s.overflow for s in stats.values())),
            "underflow": int(sum(s.underflow for s in stats.values())),
            "by_role": {role: {"overflow": s.overflow, "underflow": s.underflow, "absmax": s.absmax}
                        for role, s in sorted(stats.items())},
        }

    # -- loop ------------------------------------------------------------------------

    def run(self, stop_at: int | None = None, log=None) -> RunResult:
        """Train until ``total_steps``, a divergence halt, or ``stop_at`` steps."""
        c = self.config
        stop = c.total_steps if stop_at is None else min(stop_at, c.total_steps)
        t0 = time.time()
        with open(self.out_dir / METRICS_FILE, "a", encoding="utf-8") as fh:
            while self.step < stop and self.status == RUNNING:
                rec = self.train_step()
                fh.write(json.dumps(rec) + "\n")
                if c.checkpoint_every and self.step % c.checkpoint_every == 0 and self.status != DIVERGED:
                    self.save(self.checkpoint_path(self.step))
                if log is not None and (self.step % 50 == 0 or self.status != RUNNING):
                    log(f"step {self.step:5d} loss {self.last_loss:.4f} lr {rec['lr']:.2e} "
                        f"{time.time() - t0:7.1f}s {self.status}")
            fh.flush()
        if self.status != RUNNING:
            self.save(self.out_dir / FINAL_CHECKPOINT)
        reason = ""
        if self.status == DIVERGED:
            reason = "see halt_reason in the last metrics record"
        return RunResult(self.status, self.step, self.out_dir, self.last_loss, reason)

    def checkpoint_path(self, step: int) -> Path:
        d = self.out_dir / CHECKPOINT_DIR
        d.mkdir(exist_ok=True)
        return d / f"step_{step:06d}.ckpt"

    # -- persistence -------------------------------------------------------------------

    def save(self, path):
        opt = self.optimizer.state
        arrays = {f"param:{k}": p.data for k, p in self.model.params.items()}
        arrays.update({f"buffer:{k}": v for k, v in self.model.buffers.items()})
        arrays.update({f"adam_m:{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam_v:{k}": v for k, v in opt.v.items()})
        meta = {
            "config": self.config.to_dict(),
            "step": self.step,
            "status": self.status,
            "optimizer_step": opt.step,
            "data_position": self.step,  # batch index of the next step
            "data_seed": self.corpus.seed,
            "recent_losses": list(self.recent_losses),
            "histories": self.precision.state(),
        }
        save_checkpoint(path, meta, arrays)

    def load(self, path):
        meta, arrays = load_checkpoint(path)
        saved = TrainConfig.from_dict(meta["config"])
        for key in ("arch", "layers", "hidden", "ffn_hidden", "heads", "qk_groups", "vocab", "tied_embeddings"):
            if getattr(saved, key) != getattr(self.config, key):
                raise ValueError(f"checkpoint {key}={getattr(saved, key)!r} does not match config")
        for k, p in self.model.params.items():
            p.data[...] = arrays[f"param:{k}"]
        for k in self.model.buffers:
            self.model.buffers[k][...] = arrays[f"buffer:{k}"]
        self.optimizer.state = AdamWState(
            m={k[len("adam_m:"):]: v for k, v in arrays.items() if k.startswith("adam_m:")},
            v={k[len("adam_v:"):]: v for k, v in arrays.items() if k.startswith("adam_v:")},
            step=meta["optimizer_step"],
        )
        self.precision.load_state(meta["histories"])
        self.step = meta["step"]
        self.recent_losses = deque(meta["recent_losses"], maxlen=self.config.explosion_window)
        self.status = RUNNING if self.step < self.config.total_steps else meta.get("status", COMPLETED)

    def _truncate_metrics(self):
        """Drop metrics lines past the current step so a resumed run appends cleanly."""
        path = self.out_dir / METRICS_FILE
        if not path.exists():
            return
        keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()
                if ln.strip() and json.loads(ln)["step"] <= self.step]
        path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


def train(config: TrainConfig, out_dir, resume=None, stop_at: int | None = None, log=None) -> RunResult:
    return Trainer(config, out_dir, resume=resume).run(stop_at=stop_at, log=log)


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_FILE
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def kurtosis_series(records: list[dict], probe: str, layer="mean") -> list[tuple[int, float]]:
    """``(tokens, value)`` pairs for one probe/layer, skipping undefined values."""
    out = []
    for rec in records:
        for k in rec.get("kurtosis", ()):
            if k["probe"] == probe and k["layer"] == layer and k["value"] is not None:
                out.append((rec["tokens"], k["value"]))
    return out


def smoothed_final_loss(records: list[dict], last: int = 100) -> float:
    losses = [r["loss"] for r in records if r.get("loss") is not None]
    if not losses:
        return math.nan
    return float(np.mean(losses[-last:]))
