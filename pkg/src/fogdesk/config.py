"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from fogdesk.models import ARCHITECTURES, DEFAULT_QK_GAIN, ModelConfig
from fogdesk.precision import METHODS


class ConfigError(ValueError):
    """A configuration that cannot be run; ``key`` names the offending field."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class TrainConfig:
    arch: str = "fog-opt"
    layers: int = 4
    hidden: int = 128
    ffn_hidden: int = 512
    heads: int = 4
    qk_groups: int = 2
    vocab: int = 257
    softmax_scale: float | None = None
    qk_gain: float = DEFAULT_QK_GAIN
    tied_embeddings: bool = True
    init_std: float = 0.02
    total_steps: int = 2000
    batch_size: int = 16
    context: int = 256
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    cooldown_steps: int = 400
    min_lr: float = 1e-8
    weight_decay: float = 0.1
    decay_in_cooldown: bool = False  # scale weight decay with the cooldown lr ratio
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    precision: str = "bf16"
    probe_stride: int = 1
    corpus: str = ""
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    history_len: int = 1024
    margin: int = 0
    explosion_factor: float = 3.0
    explosion_window: int = 500

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {sorted(ARCHITECTURES)}", "arch")
        if self.precision.lower() not in METHODS:
            raise ConfigError(f"unknown precision {self.precision!r}; choose from {sorted(METHODS)}", "precision")
        self.precision = self.precision.lower()
        for key in ("total_steps", "batch_size", "context", "probe_stride", "history_len", "explosion_window"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key)
        for key in ("warmup_steps", "cooldown_steps", "checkpoint_every", "margin"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", key)
        if self.warmup_steps + self.cooldown_steps > self.total_steps:
            raise ConfigError("warmup_steps + cooldown_steps exceeds total_steps", "warmup_steps")
        if not (0 <= self.min_lr <= self.peak_lr):
            raise ConfigError("need 0 <= min_lr <= peak_lr", "min_lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)", "beta1")
        if self.grad_clip <= 0 or not math.isfinite(self.grad_clip):
            raise ConfigError("grad_clip must be positive", "grad_clip")
        if self.vocab < 257:
            raise ConfigError("byte-level vocab needs at least 257 ids", "vocab")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e), "hidden") from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(layers=self.layers, hidden=self.hidden, ffn_hidden=self.ffn_hidden,
                           heads=self.heads, qk_groups=self.qk_groups, softmax_scale=self.softmax_scale,
                           qk_gain=self.qk_gain, tied_embeddings=self.tied_embeddings, vocab=self.vocab,
                           init_std=self.init_std, context=self.context)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}", k)
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return self.from_dict({**self.to_dict(), **kw})


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_value(key: str, raw: str):
    """Convert the text of one config value to the field's type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}", key)
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if "None" in kind and raw.lower() in ("none", ""):
            return None
        if kind.startswith("bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} ({kind})", key) from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns raw overrides."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def load_config(path, **overrides) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    values.update(overrides)
    return TrainConfig.from_dict(values)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
