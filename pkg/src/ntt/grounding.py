"""Pointer over regions with a visual sentinel, textual distribution and slot filling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import RegionFeatures
from .decoder import StepOutput
from .nn import relu_ff
from .tensor import ParamStore, Tensor


@dataclass
class GroundingOutput:
    """Log-distributions of one step; probabilities are derived on access.

    ``log_r`` has K+1 columns with the sentinel last; padded regions are -inf.
    """

    log_txt: Tensor  # (B, S)
    log_r: Tensor  # (B, K+1)
    log_p: Tensor  # (B, 2)
    log_sc: Tensor  # (B, C)

    @property
    def K(self) -> int:
        return self.log_r.shape[1] - 1

    @property
    def S(self) -> int:
        return self.log_txt.shape[1]

    @property
    def log_full(self) -> Tensor:
        """(B, S+K): log P_txt + log P_r[sentinel] for textual words, log P_r[i] for region i."""
        K, S = self.K, self.S
        sentinel = T.expand(self.log_r[:, K], 1, S)
        return T.concat([self.log_txt + sentinel, self.log_r[:, :K]], axis=-1)

    @property
    def P_txt(self) -> np.ndarray:
        return np.exp(self.log_txt.data)

    @property
    def P_r(self) -> np.ndarray:
        return np.exp(self.log_r.data)

    @property
    def P_p(self) -> np.ndarray:
        return np.exp(self.log_p.data)

    @property
    def P_sc(self) -> np.ndarray:
        return np.exp(self.log_sc.data)

    @property
    def P_full(self) -> np.ndarray:
        return compose_word_distribution(self.P_txt, self.P_r)

    @classmethod
    def from_probs(cls, P_txt, P_r, P_p, P_sc) -> "GroundingOutput":
        with np.errstate(divide="ignore"):
            return cls(*(Tensor(np.log(np.atleast_2d(np.asarray(p, dtype=float))))
                         for p in (P_txt, P_r, P_p, P_sc)))


def pointing_logits(V: Tensor, h5: Tensor, params: ParamStore, projected: Tensor | None = None) -> Tensor:
    """u_i = w_h . tanh(W_v v_i + W_z h5) for each region: (B, K, d_v), (B, d) -> (B, K)."""
    if V.shape[1] == 0:
        raise ValueError("pointing_logits: no regions (K=0)")
    proj = T.matmul(V, params["ptr.W_v"]) if projected is None else projected
    query = T.expand(T.matmul(h5, params["ptr.W_z"]), 1, V.shape[1])
    return T.matmul(T.tanh(proj + query), params["ptr.w_h"])


def sentinel(x_t: Tensor, h5_prev: Tensor, c5: Tensor, params: ParamStore) -> Tensor:
    """s_t = sigmoid(W_x x_t + W_h h5_{t-1}) * tanh(c5_t)."""
    if c5.shape != h5_prev.shape:
        raise ValueError(f"sentinel: shape mismatch {h5_prev.shape} vs {c5.shape}")
    gate = T.sigmoid(T.matmul(x_t, params["sent.W_x"]) + T.matmul(h5_prev, params["sent.W_h"]))
    return gate * T.tanh(c5)


def sentinel_logit(s_t: Tensor, h5: Tensor, params: ParamStore) -> Tensor:
    pre = T.tanh(T.matmul(s_t, params["ptr.W_s"]) + T.matmul(h5, params["ptr.W_z"]))
    return T.reshape(T.matmul(pre, params["ptr.w_h"]), (s_t.shape[0], 1))


def _region_mask(mask, B: int, K: int) -> np.ndarray:
    mask = np.ones((B, K), bool) if mask is None else np.asarray(mask, bool)
    return np.concatenate([mask, np.ones((B, 1), bool)], axis=1)


def region_logits(u: Tensor, s_t: Tensor, h5: Tensor, params: ParamStore) -> Tensor:
    return T.concat([u, sentinel_logit(s_t, h5, params)], axis=-1)


def region_distribution(u: Tensor, s_t: Tensor, h5: Tensor, params: ParamStore, mask=None) -> Tensor:
    """Softmax over [u ; sentinel logit]; the sentinel is the last column."""
    B, K = u.shape
    return T.softmax(region_logits(u, s_t, h5, params), _region_mask(mask, B, K))


def textual_distribution(mh: Tensor, W_q: Tensor) -> Tensor:
    return T.softmax(T.matmul(mh, W_q))


def compose_word_distribution(P_txt, P_r) -> np.ndarray:
    """[P_txt * P_r[sentinel] ; P_r[regions]] over S textual words then K regions."""
    P_txt, P_r = np.atleast_2d(P_txt), np.atleast_2d(P_r)
    return np.concatenate([P_txt * P_r[:, -1:], P_r[:, :-1]], axis=1)


def _slot_hidden(v_t: Tensor, h5: Tensor, params: ParamStore):
    z = T.concat([v_t, h5], axis=-1)
    return relu_ff(params["slot.Rb.W"], params["slot.Rb.b"], z), relu_ff(params["slot.Rg.W"], params["slot.Rg.b"], z)


def slot_logits(v_t: Tensor, h5: Tensor, U: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Plurality and sub-category logits for the pointed-to region features.

    ``U`` holds one embedding row per sub-category word, (C, e).
    """
    if v_t.shape[0] != h5.shape[0]:
        raise ValueError(f"slot_fill: batch mismatch {v_t.shape} vs {h5.shape}")
    rb, rg = _slot_hidden(v_t, h5, params)
    plural = T.matmul(rb, params["slot.W_p"])
    subcat = T.matmul(T.matmul(rg, params["slot.W_sc"]), T.transpose(U))
    return plural, subcat


def slot_fill(v_t: Tensor, h5: Tensor, U: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    plural, subcat = slot_logits(v_t, h5, U, params)
    return T.softmax(plural), T.softmax(subcat)


def subcat_embeddings(params: ParamStore, subcat_words) -> Tensor:
    return T.gather_rows(params["embed"], subcat_words)


def ground(step: StepOutput, regions: RegionFeatures, params: ParamStore, slot_regions, subcat_words,
           cache: dict | None = None) -> GroundingOutput:
    """All distributions of one step.

    ``slot_regions`` (B,) selects the region whose features feed slot filling
    (the annotated region under teacher forcing).
    """
    B, K = regions.batch, regions.K
    u = pointing_logits(regions.V, step.h, params, cache.get("ptr") if cache else None)
    s_t = sentinel(step.x, step.h_prev, step.c, params)
    log_r = T.log_softmax(region_logits(u, s_t, step.h, params), _region_mask(regions.mask, B, K))
    log_txt = T.log_softmax(T.matmul(step.mh, params["txt.W_q"]))
    idx = np.asarray(slot_regions, dtype=np.intp)
    v_t = regions.V[np.arange(B), idx]
    U = subcat_embeddings(params, subcat_words)
    plural, subcat = slot_logits(v_t, step.h, U, params)
    return GroundingOutput(log_txt, log_r, T.log_softmax(plural), T.log_softmax(subcat))


def slot_choices(step: StepOutput, regions: RegionFeatures, params: ParamStore, subcat_words):
    """Argmax plurality and sub-category for every region at once: two (B, K) int arrays."""
    B, K, dv = regions.V.shape
    v = T.reshape(regions.V, (B * K, dv))
    h = T.reshape(T.expand(step.h, 1, K), (B * K, step.h.shape[1]))
    U = subcat_embeddings(params, subcat_words)
    plural, subcat = slot_logits(v, h, U, params)
    return (np.argmax(plural.data, axis=1).reshape(B, K), np.argmax(subcat.data, axis=1).reshape(B, K))
