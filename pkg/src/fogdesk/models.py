"""Transformer families built from one parameterised block.

Every architecture is a choice of input scale, final / pre / post norm slots,
QK regulariser and FFN activation. The block is

    X' = X + post1(GQA(pre1(X)))
    out = X' + post2(FFN(pre2(X')))

with identity slots being true no-ops, so the residual stream itself is
never normalised.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fogdesk import functional as F
from fogdesk.precision import ATTN_SCORES, ATTN_VALUES, LINEAR, OUTPUT, PrecisionState
from fogdesk.tensor import Tensor, concat, split

IDENTITY = "identity"
RMSNORM = "rmsnorm"
LAYERSCALE = "layerscale"
RMSNORM_FROZEN = "rmsnorm_frozen"
TANH_ALPHA = "tanh_alpha"

DEFAULT_QK_GAIN = math.sqrt(2.0)
TANH_ALPHA_INIT = 0.5
XIELU_INIT = 0.8  # initial alpha_p and alpha_n


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    inverse_sigma_input: bool  # u = 1/sigma0 instead of 1
    n_final: str
    n_pre: str
    n_post: str
    n_qk: str
    activation: str
    post_gain_inv_sqrt_layers: bool
    qk_gains_trainable: bool

    def input_scale(self, config: "ModelConfig") -> float:
        return 1.0 / config.init_std if self.inverse_sigma_input else 1.0

    def post_gain_init(self, config: "ModelConfig") -> float:
        return 1.0 / math.sqrt(config.layers) if self.post_gain_inv_sqrt_layers else 1.0

    @property
    def glu(self) -> bool:
        return self.activation in F.GLU_ACTIVATIONS


def _arch(name, inv_sigma, final, pre, post, qk, act, qk_trainable):
    return ArchitectureSpec(name, inv_sigma, final, pre, post, qk, act,
                            post_gain_inv_sqrt_layers=inv_sigma, qk_gains_trainable=qk_trainable)


ARCHITECTURES = {
    a.name: a
    for a in (
        _arch("llama", False, RMSNORM, RMSNORM, IDENTITY, IDENTITY, "swiglu", True),
        _arch("llama-smoothswiglu", False, RMSNORM, RMSNORM, IDENTITY, IDENTITY, "smoothswiglu", True),
        _arch("olmo2", False, RMSNORM, IDENTITY, RMSNORM, RMSNORM, "swiglu", True),
        _arch("op", True, IDENTITY, IDENTITY, LAYERSCALE, RMSNORM, "gelu", True),
        _arch("fog-max", True, IDENTITY, IDENTITY, RMSNORM, RMSNORM_FROZEN, "xielu", False),
        _arch("fog-opt", True, IDENTITY, IDENTITY, RMSNORM, RMSNORM_FROZEN, "gelu", False),
        _arch("fog-flash", True, IDENTITY, IDENTITY, RMSNORM, TANH_ALPHA, "gelu", False),
    )
}


def get_architecture(name: str) -> ArchitectureSpec:
    try:
        return ARCHITECTURES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None


def effective_softmax_scale(gamma0: float, d_qk: int) -> float:
    """Softmax scale equivalent to QK RMSNorm with constant gains ``gamma0``."""
    if gamma0 <= 0 or d_qk <= 0:
        raise ValueError("gamma0 and d_qk must be positive")
    return gamma0 * gamma0 / math.sqrt(d_qk)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    ffn_hidden: int = 512  # per-branch width of a GLU; non-GLU nets use 1.5x
    heads: int = 4
    qk_groups: int = 2
    softmax_scale: float | None = None  # None: architecture default
    qk_gain: float = DEFAULT_QK_GAIN  # folded into the scale for frozen QK norms
    tied_embeddings: bool = True
    vocab: int = 257
    init_std: float = 0.02
    context: int = 256
    rope_base: float = F.ROPE_BASE

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        if self.heads % self.qk_groups:
            raise ValueError("heads must be divisible by qk_groups")
        if (self.hidden // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if (3 * self.ffn_hidden) % 2:
            raise ValueError("ffn_hidden must be even so that 1.5x is an integer")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def ffn_width(self, spec: ArchitectureSpec) -> int:
        return self.ffn_hidden if spec.glu else 3 * self.ffn_hidden // 2

    def scale_for(self, spec: ArchitectureSpec) -> float:
        if self.softmax_scale is not None:
            return self.softmax_scale
        if spec.n_qk == RMSNORM_FROZEN:
            return effective_softmax_scale(self.qk_gain, self.head_dim)
        return 1.0 / math.sqrt(self.head_dim)


REFERENCE_390M = ModelConfig(layers=16, hidden=1024, ffn_hidden=4096, heads=8, qk_groups=4,
                         softmax_scale=None, tied_embeddings=True, vocab=131072, context=4096)


# -- parameter layout --------------------------------------------------------------


def param_shapes(spec: ArchitectureSpec, config: ModelConfig) -> dict:
    """Ordered ``name -> (shape, init, trainable)`` for every parameter and buffer.

    ``init`` is ``"normal"`` or a constant fill value.
    """
    c = config
    D, d, H, G = c.hidden, c.head_dim, c.heads, c.qk_groups
    out = {"embed": ((c.vocab, D), "normal", True)}
    post_gain = spec.post_gain_init(c)
    width = c.ffn_width(spec)
    for i in range(c.layers):
        p = f"blocks.{i}."
        if spec.n_pre == RMSNORM:
            out[p + "norm1_pre.gain"] = ((D,), 1.0, True)
        out[p + "attn.wq"] = ((D, H * d), "normal", True)
        out[p + "attn.wk"] = ((D, G * d), "normal", True)
        out[p + "attn.wv"] = ((D, G * d), "normal", True)
        if spec.n_qk in (RMSNORM, RMSNORM_FROZEN):
            trainable = spec.n_qk == RMSNORM and spec.qk_gains_trainable
            out[p + "attn.q_norm.gain"] = ((d,), 1.0, trainable)
            out[p + "attn.k_norm.gain"] = ((d,), 1.0, trainable)
        elif spec.n_qk == TANH_ALPHA:
            out[p + "attn.q_alpha"] = ((), TANH_ALPHA_INIT, spec.qk_gains_trainable)
            out[p + "attn.k_alpha"] = ((), TANH_ALPHA_INIT, spec.qk_gains_trainable)
        out[p + "attn.wo"] = ((H * d, D), "normal", True)
        if spec.n_post in (RMSNORM, LAYERSCALE):
            out[p + "norm1_post.gain"] = ((D,), post_gain, True)
        if spec.n_pre == RMSNORM:
            out[p + "norm2_pre.gain"] = ((D,), 1.0, True)
        if spec.glu:
            out[p + "ffn.w_gate"] = ((D, width), "normal", True)
            out[p + "ffn.w_value"] = ((D, width), "normal", True)
        else:
            out[p + "ffn.w_up"] = ((D, width), "normal", True)
        out[p + "ffn.w_down"] = ((width, D), "normal", True)
        if spec.activation == "xielu":
            out[p + "ffn.alpha_p"] = ((), _inv_softplus(XIELU_INIT), True)
            out[p + "ffn.alpha_n"] = ((), _inv_softplus(XIELU_INIT - F.XIELU_BETA), True)
        if spec.n_post in (RMSNORM, LAYERSCALE):
            out[p + "norm2_post.gain"] = ((D,), post_gain, True)
    if spec.n_final == RMSNORM:
        out["norm_final.gain"] = ((D,), 1.0, True)
    if not c.tied_embeddings:
        out["head"] = ((D, c.vocab), "normal", True)
    return out


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def param_count(spec: ArchitectureSpec, config: ModelConfig) -> dict:
    """Trainable parameter totals itemised by component, plus ``"total"``."""
    items = {"embedding": 0, "attention": 0, "ffn": 0, "norms": 0, "activation": 0, "head": 0}
    for name, (shape, _, trainable) in param_shapes(spec, config).items():
        if not trainable:
            continue
        n = int(np.prod(shape, dtype=np.int64))
        if name == "embed":
            key = "embedding"
        elif name == "head":
            key = "head"
        elif ".attn.w" in name:
            key = "attention"
        elif ".ffn.w" in name:
            key = "ffn"
        elif "alpha" in name and ".ffn." in name:
            key = "activation"
        else:
            key = "norms"
        items[key] += n
    items["total"] = sum(items.values())
    return items


def no_decay(name: str) -> bool:
    """Gains and scalar activation / QK parameters are not weight-decayed."""
    return name.endswith(".gain") or "alpha" in name


# -- model -------------------------------------------------------------------------------


@dataclass
class Model:
    spec: ArchitectureSpec
    config: ModelConfig
    params: dict = field(default_factory=dict)  # name -> Tensor (trainable)
    buffers: dict = field(default_factory=dict)  # name -> ndarray (frozen)
    precision: PrecisionState | None = None
    probe_sink: dict | None = None  # (probe, layer) -> array, filled during forward

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def named_parameters(self):
        return list(self.params.items())

    def _get(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers.get(name)

    def _mm(self, a, b, role, kind=LINEAR):
        return F.matmul(a, b, role=role, kind=kind, precision=self.precision)

    def _probe(self, probe, layer, t: Tensor):
        if self.probe_sink is not None:
            self.probe_sink[(probe, layer)] = t.data

    # slots ----------------------------------------------------------------------

    def _norm(self, kind, x, gain_name):
        if kind == IDENTITY:
            return x
        if kind == RMSNORM:
            return F.rmsnorm(x, self._get(gain_name))
        if kind == LAYERSCALE:
            return x * self._get(gain_name)
        raise ValueError(f"unknown norm slot {kind!r}")

    def _qk_reg(self, x, prefix, which):
        kind = self.spec.n_qk
        if kind == IDENTITY:
            return x
        if kind in (RMSNORM, RMSNORM_FROZEN):
            return F.rmsnorm(x, self._get(f"{prefix}attn.{which}_norm.gain"))
        if kind == TANH_ALPHA:
            return F.tanh_alpha(x, self._get(f"{prefix}attn.{which}_alpha"))
        raise ValueError(f"unknown QK regulariser {kind!r}")

    # sublayers --------------------------------------------------------------------

    def gqa_forward(self, x: Tensor, layer: int, positions=None) -> Tensor:
        c = self.config
        N, C, D = x.shape
        H, G, d = c.heads, c.qk_groups, c.head_dim
        p = f"blocks.{layer}."
        positions = np.arange(C) if positions is None else positions
        w = concat([self._get(p + "attn.wq"), self._get(p + "attn.wk"), self._get(p + "attn.wv")], axis=1)
        qkv = self._mm(x, w, p + "qkv")
        self._probe("qkv", layer, qkv)
        q, k, v = split(qkv, [H * d, G * d, G * d], axis=-1)
        q = self._qk_reg(q.reshape(N, C, H, d), p, "q").transpose(0, 2, 1, 3)
        k = self._qk_reg(k.reshape(N, C, G, d), p, "k").transpose(0, 2, 1, 3)
        v = v.reshape(N, C, G, d).transpose(0, 2, 1, 3)
        q = F.rope(q, positions, c.rope_base).reshape(N, G, H // G, C, d)
        k = F.rope(k, positions, c.rope_base).reshape(N, G, 1, C, d)
        v = v.reshape(N, G, 1, C, d)
        scores = self._mm(q, k.swapaxes(-1, -2), p + "scores", ATTN_SCORES)
        probs = F.softmax_rows(scores, "causal", scale=c.scale_for(self.spec))
        o = self._mm(probs, v, p + "values", ATTN_VALUES)
        o = o.reshape(N, H, C, d).transpose(0, 2, 1, 3).reshape(N, C, H * d)
        return self._mm(o, self._get(p + "attn.wo"), p + "attn_out")

    def ffn_forward(self, x: Tensor, layer: int) -> Tensor:
        p = f"blocks.{layer}."
        act = self.spec.activation
        w_down = self._get(p + "ffn.w_down")
        if self.spec.glu:
            width = self.config.ffn_width(self.spec)
            w = concat([self._get(p + "ffn.w_gate"), self._get(p + "ffn.w_value")], axis=1)
            gate, value = split(self._mm(x, w, p + "ffn_up"), [width, width], axis=-1)
            h = F.swiglu(gate, value)
            if act == "smoothswiglu":
                # per-channel rescale folded into the down projection; exact in real arithmetic
                s = np.max(np.abs(h.data), axis=tuple(range(h.ndim - 1)))
                s = np.where(s > 0, s, 1.0).astype(h.dtype)
                h = h * (1.0 / s)
                w_down = w_down * s[:, None]
        else:
            u = self._mm(x, self._get(p + "ffn.w_up"), p + "ffn_up")
            if act == "xielu":
                h = F.xielu(u, self._get(p + "ffn.alpha_p"), self._get(p + "ffn.alpha_n"))
            else:
                h = F.activation(act, u)
        self._probe("ffn_second_input", layer, h)
        return self._mm(h, w_down, p + "ffn_down")

    def block_forward(self, x: Tensor, layer: int, positions=None) -> Tensor:
        s, p = self.spec, f"blocks.{layer}."
        a = self.gqa_forward(self._norm(s.n_pre, x, p + "norm1_pre.gain"), layer, positions)
        x = x + self._norm(s.n_post, a, p + "norm1_post.gain")
        f = self.ffn_forward(self._norm(s.n_pre, x, p + "norm2_pre.gain"), layer)
        x = x + self._norm(s.n_post, f, p + "norm2_post.gain")
        self._probe("block_output", layer, x)
        return x

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids)
        u = self.spec.input_scale(self.config)
        x = F.embedding(self.params["embed"], ids)
        return x * u if u != 1.0 else x

    def forward(self, ids) -> Tensor:
        """Logits of shape ``(N * C, vocab)`` for token ids of shape ``(N, C)``."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("token ids must have shape (batch, context)")
        N, C = ids.shape
        x = self.embed(ids)
        for i in range(self.config.layers):
            x = self.block_forward(x, i)
        x = self._norm(self.spec.n_final, x, "norm_final.gain").reshape(N * C, self.config.hidden)
        head = self.params["embed"].T if self.config.tied_embeddings else self.params["head"]
        return self._mm(x, head, "head", OUTPUT)

    def loss(self, ids, targets) -> Tensor:
        return F.cross_entropy(self.forward(ids), np.asarray(targets).reshape(-1))

    # state --------------------------------------------------------------------------

    def state_arrays(self) -> dict:
        out = {k: t.data for k, t in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out


def build_model(spec: ArchitectureSpec | str, config: ModelConfig | None = None, seed: int = 0,
                dtype=np.float32, precision: PrecisionState | None = None) -> Model:
    """Initialise a model; normal weights are drawn in declaration order."""
    spec = get_architecture(spec) if isinstance(spec, str) else spec
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    model = Model(spec, config, precision=precision)
    for name, (shape, init, trainable) in param_shapes(spec, config).items():
        if init == "normal":
            arr = rng.normal(0.0, config.init_std, size=shape).astype(dtype)
        else:
            arr = np.full(shape, init, dtype=dtype)
        if trainable:
            model.params[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            model.buffers[name] = arr
    return model


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
