"""Twin cascaded attention decoder and the single-channel baseline.

The twin decoder runs two attention channels (left: h1/c1 attention LSTM,
h2/c2 language LSTM; right: h3/c3, h4/c4) over a shared input, couples them
with cascaded adaptive gates and fuses them into a joint LSTM (h5/c5).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import (AttentionWeights, ChannelState, RegionFeatures, channel_step, pooled,
                        project_regions)
from .nn import LstmParams, LstmState, dropout_apply, embed_lookup, init_lstm, lstm_step
from .tensor import ParamStore, Tensor

MODEL_KINDS = ("twin", "baseline")


@dataclass
class ModelConfig:
    kind: str = "twin"
    n_vocab: int = 32  # rows of the embedding table
    n_textual: int = 16  # S, size of the textual vocabulary (ids 0..S-1)
    n_subcats: int = 8  # C
    d_v: int = 20
    hidden: int = 64
    embed: int = 32
    att_hidden: int = 0  # 0 -> same as hidden
    slot_hidden: int = 0  # 0 -> same as hidden
    dropout: tuple = (0.3, 0.7, 0.8, 0.5)  # h2, h4, h5, meta hypothesis
    baseline_dropout: float = 0.5
    init_scale: float = 0.08
    forget_bias: float = 1.0
    attention_tanh: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        self.dropout = tuple(float(r) for r in self.dropout)
        if len(self.dropout) != 4:
            raise ValueError("dropout needs four rates (h2, h4, h5, MH)")
        for name in ("n_vocab", "n_textual", "n_subcats", "d_v", "hidden", "embed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_textual > self.n_vocab:
            raise ValueError("n_textual cannot exceed n_vocab")

    @property
    def a(self) -> int:
        return self.att_hidden or self.hidden

    @property
    def r(self) -> int:
        return self.slot_hidden or self.hidden

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout"] = list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DecoderState:
    left: ChannelState
    right: ChannelState
    joint: LstmState


@dataclass
class BaselineState:
    left: ChannelState


@dataclass
class GateSet:
    g1: Tensor
    g2: Tensor
    g3: Tensor


@dataclass
class StepOutput:
    """What the grounding head needs from one decoder step.

    For the twin decoder ``h``/``c`` are h5 and the gated c5; for the baseline
    they are the language LSTM's h and c, and ``mh`` is its dropped-out h.
    """

    state: object
    mh: Tensor
    h: Tensor
    c: Tensor
    h_prev: Tensor
    x: Tensor
    gates: GateSet | None = None
    alphas: dict = field(default_factory=dict)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform(-init_scale, init_scale) weights, zero biases, forget-gate bias ``forget_bias``."""
    rng = np.random.default_rng(seed)
    s = cfg.init_scale
    d, e, dv, a, r = cfg.hidden, cfg.embed, cfg.d_v, cfg.a, cfg.r
    p = ParamStore()

    def u(*shape):
        return rng.uniform(-s, s, shape)

    p.add("embed", u(cfg.n_vocab, e))
    p.add("att.W_v", u(dv, a))
    p.add("att.W_h", u(d, a))
    p.add("att.w_beta", u(a))
    channels = ("left", "right") if cfg.kind == "twin" else ("left",)
    for ch in channels:
        init_lstm(p, f"{ch}.attn", e + dv, d, rng, s, cfg.forget_bias)
        init_lstm(p, f"{ch}.lang", 2 * dv + d, d, rng, s, cfg.forget_bias)
    if cfg.kind == "twin":
        init_lstm(p, "joint", 2 * dv + d, d, rng, s, cfg.forget_bias)
        for k in (1, 2, 3):
            p.add(f"gate.W{k}", u(d, d))
    p.add("ptr.W_v", u(dv, a))
    p.add("ptr.W_z", u(d, a))
    p.add("ptr.w_h", u(a))
    p.add("ptr.W_s", u(d, a))
    p.add("sent.W_x", u(e + dv, d))
    p.add("sent.W_h", u(d, d))
    p.add("txt.W_q", u(d, cfg.n_textual))
    p.add("slot.Rb.W", u(dv + d, r))
    p.add("slot.Rb.b", np.zeros(r))
    p.add("slot.W_p", u(r, 2))
    p.add("slot.Rg.W", u(dv + d, r))
    p.add("slot.Rg.b", np.zeros(r))
    p.add("slot.W_sc", u(r, e))
    return p.astype(cfg.np_dtype)


def initial_state(cfg: ModelConfig, batch: int):
    z = lambda: LstmState.zeros(batch, cfg.hidden, cfg.np_dtype)  # noqa: E731
    if cfg.kind == "twin":
        return DecoderState(ChannelState(z(), z()), ChannelState(z(), z()), z())
    return BaselineState(ChannelState(z(), z()))


def prepare(regions: RegionFeatures, params: ParamStore, cfg: ModelConfig) -> dict:
    """Step-invariant projections of the region features for one sequence."""
    weights = AttentionWeights.from_store(params, cfg.attention_tanh)
    cache = project_regions(regions, weights)
    cache["pooled"] = pooled(regions.Vbar, regions.mask)
    cache["ptr"] = T.matmul(regions.V, params["ptr.W_v"])
    return cache


def shared_input(tokens, regions: RegionFeatures, params: ParamStore, cache: dict | None = None) -> Tensor:
    emb = embed_lookup(params["embed"], tokens)
    pool = cache["pooled"] if cache else pooled(regions.Vbar, regions.mask)
    return T.concat([emb, pool], axis=-1)


def adaptive_gates(state: DecoderState, params: ParamStore) -> GateSet:
    """Cascaded gates from the freshly stepped states.

    g1 = s((h1 + c1) W1), g2 = s((h3 + c3) W2) + g1,
    g3 = s((h2 + c2 + h4 + c4) W3) + g2.
    """
    l, r = state.left, state.right
    g1 = T.sigmoid(T.matmul(l.attn.h + l.attn.c, params["gate.W1"]))
    g2 = T.sigmoid(T.matmul(r.attn.h + r.attn.c, params["gate.W2"])) + g1
    mix = l.lang.h + l.lang.c + r.lang.h + r.lang.c
    g3 = T.sigmoid(T.matmul(mix, params["gate.W3"])) + g2
    return GateSet(g1, g2, g3)


def apply_gates(gates: GateSet, c2: Tensor, c4: Tensor, c5: Tensor):
    return gates.g1 * c2, gates.g2 * c4, gates.g3 * c5


def joint_fuse(left_lang: LstmState, right_lang: LstmState, left_in: Tensor, right_in: Tensor):
    """Joint LSTM incoming state (h2+h4, c2+c4) and input (in1 + in2)."""
    prev = LstmState(left_lang.h + right_lang.h, left_lang.c + right_lang.c)
    return prev, left_in + right_in


def meta_hypothesis(h2: Tensor, h4: Tensor, h5: Tensor, train: bool, rng: np.random.Generator | None,
                    rates=(0.3, 0.7, 0.8, 0.5)) -> Tensor:
    """Sum of dropped-out h2, h4, h5, then dropout again.

    Masks are drawn from ``rng`` in the order h2, h4, h5, sum.
    """
    r2, r4, r5, r_mh = rates
    mh = dropout_apply(h2, r2, train, rng) + dropout_apply(h4, r4, train, rng) + dropout_apply(h5, r5, train, rng)
    return dropout_apply(mh, r_mh, train, rng)


def decoder_step(state: DecoderState, tokens, regions: RegionFeatures, params: ParamStore, cfg: ModelConfig,
                 train: bool = False, rng: np.random.Generator | None = None,
                 cache: dict | None = None) -> StepOutput:
    cache = cache if cache is not None else prepare(regions, params, cfg)
    weights = AttentionWeights.from_store(params, cfg.attention_tanh)
    x = shared_input(tokens, regions, params, cache)

    left_attn, in1, a1v, a1vb = channel_step(state.left, x, regions, LstmParams.from_store(params, "left.attn"),
                                             weights, cache)
    right_attn, in2, a2v, a2vb = channel_step(state.right, x, regions, LstmParams.from_store(params, "right.attn"),
                                              weights, cache)
    left_lang = lstm_step(LstmParams.from_store(params, "left.lang"), in1, state.left.lang)
    right_lang = lstm_step(LstmParams.from_store(params, "right.lang"), in2, state.right.lang)

    fresh = DecoderState(ChannelState(left_attn, left_lang), ChannelState(right_attn, right_lang), state.joint)
    gates = adaptive_gates(fresh, params)
    # gated contexts feed the fusion; each language LSTM keeps its own ungated cell
    gated_left = LstmState(left_lang.h, gates.g1 * left_lang.c)
    gated_right = LstmState(right_lang.h, gates.g2 * right_lang.c)

    joint_prev, joint_in = joint_fuse(gated_left, gated_right, in1, in2)
    joint = lstm_step(LstmParams.from_store(params, "joint"), joint_in, joint_prev)
    joint = LstmState(joint.h, gates.g3 * joint.c)

    mh = meta_hypothesis(left_lang.h, right_lang.h, joint.h, train, rng, cfg.dropout)
    new_state = DecoderState(fresh.left, fresh.right, joint)
    alphas = {"left.V": a1v, "left.Vbar": a1vb, "right.V": a2v, "right.Vbar": a2vb}
    return StepOutput(new_state, mh, joint.h, joint.c, state.joint.h, x, gates, alphas)


def baseline_step(state: BaselineState, tokens, regions: RegionFeatures, params: ParamStore, cfg: ModelConfig,
                  train: bool = False, rng: np.random.Generator | None = None,
                  cache: dict | None = None) -> StepOutput:
    """One attention LSTM and one language LSTM; no gates, no meta hypothesis."""
    cache = cache if cache is not None else prepare(regions, params, cfg)
    weights = AttentionWeights.from_store(params, cfg.attention_tanh)
    x = shared_input(tokens, regions, params, cache)
    attn, lang_in, av, avb = channel_step(state.left, x, regions, LstmParams.from_store(params, "left.attn"),
                                          weights, cache)
    lang = lstm_step(LstmParams.from_store(params, "left.lang"), lang_in, state.left.lang)
    mh = dropout_apply(lang.h, cfg.baseline_dropout, train, rng)
    new_state = BaselineState(ChannelState(attn, lang))
    return StepOutput(new_state, mh, lang.h, lang.c, state.left.lang.h, x, None, {"left.V": av, "left.Vbar": avb})


def step_fn(cfg: ModelConfig):
    return decoder_step if cfg.kind == "twin" else baseline_step


def map_state(state, fn):
    """Apply ``fn`` to every tensor of a decoder state (used to reorder beams)."""
    if isinstance(state, LstmState):
        return LstmState(fn(state.h), fn(state.c))
    if isinstance(state, ChannelState):
        return ChannelState(map_state(state.attn, fn), map_state(state.lang, fn))
    if isinstance(state, DecoderState):
        return DecoderState(map_state(state.left, fn), map_state(state.right, fn), map_state(state.joint, fn))
    if isinstance(state, BaselineState):
        return BaselineState(map_state(state.left, fn))
    raise TypeError(f"not a decoder state: {type(state).__name__}")
