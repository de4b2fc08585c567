"""Top-down attention channel: attention LSTM plus the shared attention network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import LstmParams, LstmState, lstm_step
from .tensor import ParamStore, Tensor


@dataclass
class RegionFeatures:
    """Padded batch of region features.

    V and Vbar are (B, K, d_v); ``mask[b, i]`` is True for the live regions of
    scene b. Scenes with fewer regions are zero-padded up to K.
    """

    V: Tensor
    Vbar: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if self.V.shape != self.Vbar.shape:
            raise ValueError(f"V {self.V.shape} and Vbar {self.Vbar.shape} must share shape")
        if self.V.ndim != 3:
            raise ValueError(f"region features must be (B, K, d_v), got {self.V.shape}")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.V.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match features {self.V.shape}")
        if self.V.shape[1] == 0 or not self.mask.any(axis=1).all():
            raise ValueError("every scene needs at least one region (K >= 1)")

    @property
    def batch(self) -> int:
        return self.V.shape[0]

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def d_v(self) -> int:
        return self.V.shape[2]

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @classmethod
    def single(cls, V, Vbar=None, dtype=np.float64) -> "RegionFeatures":
        V = np.asarray(V, dtype=dtype)
        Vbar = V if Vbar is None else np.asarray(Vbar, dtype=dtype)
        return cls(Tensor(V[None]), Tensor(Vbar[None]), np.ones((1, V.shape[0]), bool))

    @classmethod
    def stack(cls, pairs: Sequence[tuple[np.ndarray, np.ndarray]], dtype=np.float64) -> "RegionFeatures":
        if not pairs:
            raise ValueError("no scenes to stack")
        K = max(v.shape[0] for v, _ in pairs)
        d_v = pairs[0][0].shape[1]
        V = np.zeros((len(pairs), K, d_v), dtype)
        Vbar = np.zeros_like(V)
        mask = np.zeros((len(pairs), K), bool)
        for b, (v, vb) in enumerate(pairs):
            k = v.shape[0]
            V[b, :k], Vbar[b, :k], mask[b, :k] = v, vb, True
        return cls(Tensor(V), Tensor(Vbar), mask)

    def select(self, rows) -> "RegionFeatures":
        rows = np.asarray(rows, dtype=np.intp)
        return RegionFeatures(Tensor(self.V.data[rows]), Tensor(self.Vbar.data[rows]), self.mask[rows])


@dataclass
class ChannelState:
    attn: LstmState
    lang: LstmState


@dataclass
class AttentionWeights:
    W_v: Tensor  # (d_v, a)
    W_h: Tensor  # (d, a)
    w_beta: Tensor  # (a,)
    use_tanh: bool = True

    @classmethod
    def from_store(cls, params: ParamStore, use_tanh: bool = True) -> "AttentionWeights":
        return cls(params["att.W_v"], params["att.W_h"], params["att.w_beta"], use_tanh)


def attend(features: Tensor, h_attn: Tensor, weights: AttentionWeights, mask=None,
           projected: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Attention weights over K regions and the attended feature vector.

    features (B, K, d_v), h_attn (B, d) -> alpha (B, K), attended (B, d_v).
    ``projected`` may carry a cached ``features @ W_v``.
    """
    B, K = features.shape[0], features.shape[1]
    if K == 0:
        raise ValueError("attend: no regions (K=0)")
    proj = T.matmul(features, weights.W_v) if projected is None else projected
    query = T.expand(T.matmul(h_attn, weights.W_h), 1, K)
    pre = proj + query
    if weights.use_tanh:
        pre = T.tanh(pre)
    beta = T.matmul(pre, weights.w_beta)
    alpha = T.softmax(beta, mask)
    attended = T.reshape(T.matmul(T.reshape(alpha, (B, 1, K)), features), (B, features.shape[2]))
    return alpha, attended


def pooled(Vbar: Tensor, mask) -> Tensor:
    """Mean over the live rows of each scene: (B, K, d_v) -> (B, d_v)."""
    mask = np.asarray(mask, dtype=bool)
    weights = (mask / mask.sum(axis=1, keepdims=True)).astype(Vbar.dtype)
    B, K = mask.shape
    return T.reshape(T.matmul(Tensor(weights.reshape(B, 1, K)), Vbar), (B, Vbar.shape[2]))


def attention_lstm_input(embed_y: Tensor, Vbar: Tensor, mask=None) -> Tensor:
    """[embedding ; mean-pooled Vbar], the input shared by every attention LSTM."""
    if mask is None:
        mask = np.ones(Vbar.shape[:2], bool)
    return T.concat([embed_y, pooled(Vbar, mask)], axis=-1)


def channel_step(state: ChannelState, shared_in: Tensor, regions: RegionFeatures, lstm: LstmParams,
                 weights: AttentionWeights, cache: dict | None = None):
    """Step the attention LSTM and attend over V and Vbar with its new hidden state.

    Returns (new_attn, lang_input, alpha_V, alpha_Vbar) where
    lang_input = [attended V ; attended Vbar ; h_attn]. The language LSTM is
    stepped by the caller.
    """
    new_attn = lstm_step(lstm, shared_in, state.attn)
    cache = cache if cache is not None else {}
    alpha_v, att_v = attend(regions.V, new_attn.h, weights, regions.mask, cache.get("V"))
    alpha_vb, att_vb = attend(regions.Vbar, new_attn.h, weights, regions.mask, cache.get("Vbar"))
    lang_input = T.concat([att_v, att_vb, new_attn.h], axis=-1)
    return new_attn, lang_input, alpha_v, alpha_vb


def project_regions(regions: RegionFeatures, weights: AttentionWeights) -> dict:
    """Per-sequence cache of the region projections used by :func:`attend`."""
    return {"V": T.matmul(regions.V, weights.W_v), "Vbar": T.matmul(regions.Vbar, weights.W_v)}
