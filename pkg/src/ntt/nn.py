"""LSTM cell, softmax, dropout, embeddings and ReLU feed-forward layers.

All functions take batch-first tensors: a vector of size d is (B, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor


@dataclass
class LstmParams:
    W_x: Tensor  # (in, 4d), gate blocks ordered i, f, g, o
    W_h: Tensor  # (d, 4d)
    b: Tensor  # (4d,)

    @property
    def hidden(self) -> int:
        return self.W_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[0]

    @classmethod
    def from_store(cls, params: ParamStore, prefix: str) -> "LstmParams":
        return cls(params[f"{prefix}.W_x"], params[f"{prefix}.W_h"], params[f"{prefix}.b"])


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, d: int, dtype=np.float64) -> "LstmState":
        return cls(Tensor(np.zeros((batch, d), dtype)), Tensor(np.zeros((batch, d), dtype)))


def init_lstm(params: ParamStore, prefix: str, n_in: int, d: int, rng: np.random.Generator,
              scale: float = 0.08, forget_bias: float = 1.0) -> LstmParams:
    params.add(f"{prefix}.W_x", rng.uniform(-scale, scale, (n_in, 4 * d)))
    params.add(f"{prefix}.W_h", rng.uniform(-scale, scale, (d, 4 * d)))
    b = np.zeros(4 * d)
    b[d:2 * d] = forget_bias
    params.add(f"{prefix}.b", b)
    return LstmParams.from_store(params, prefix)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (B, n) plus a bias row (n,) repeated over the batch."""
    if x.shape[-1:] != b.shape:
        raise ValueError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    return x + T.expand(b, 0, x.shape[0])


def lstm_step(p: LstmParams, x: Tensor, prev: LstmState) -> LstmState:
    d = p.hidden
    if x.ndim != 2 or x.shape[1] != p.input_size:
        raise ValueError(f"lstm_step: input shape {x.shape} does not match input size {p.input_size}")
    if prev.h.shape != (x.shape[0], d) or prev.c.shape != prev.h.shape:
        raise ValueError(f"lstm_step: state shapes {prev.h.shape}/{prev.c.shape} do not match hidden size {d}")
    z = add_bias(T.matmul(x, p.W_x) + T.matmul(prev.h, p.W_h), p.b)
    zi, zf, zg, zo = T.split(z, [d, d, d, d])
    i, f, o = T.sigmoid(zi), T.sigmoid(zf), T.sigmoid(zo)
    g = T.tanh(zg)
    c = f * prev.c + i * g
    h = o * T.tanh(c)
    return LstmState(h, c)


def softmax(logits: Tensor, mask=None) -> Tensor:
    return T.softmax(T.as_tensor(logits), mask)


def dropout_apply(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Eval mode (or rate 0) returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(keep / (1.0 - rate), dtype=x.dtype)
    return x * Tensor(scale)


def embed_lookup(table: Tensor, tokens) -> Tensor:
    """Rows of the embedding table for a batch of token ids."""
    return T.gather_rows(table, tokens)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, W)
    return y if b is None else add_bias(y, b)


def relu_ff(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """max(0, xW + b)."""
    return T.relu(linear(x, W, b))
