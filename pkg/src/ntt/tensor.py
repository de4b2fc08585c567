"""Dense tensors with reverse-mode gradients, backed by numpy arrays.

Every op records a closure mapping the output gradient to input gradients.
Elementwise binary ops require identical shapes (or a Python scalar); any
other broadcasting must be spelled out with :func:`expand`.
"""

from __future__ import annotations

import builtins
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        grads = backprop(self)
        for node, g in grads.items():
            if node._parents or not node.requires_grad:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def backprop(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar root; returns gradients keyed by node.

    Leaves are included. Nothing is written onto the tensors, so separate
    graphs sharing leaves can be swept from different threads.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            out[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b) -> Tensor:
    if _scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    if _scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if _scalar(b):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: (g * b,), "mul")
    if _scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics, including stacked batches and a 2-D right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul: scalar operand {a.shape} @ {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    out2 = a2 @ b2
    out = out2.reshape((ad @ bd).shape) if (ad.ndim == 1 or bd.ndim == 1) else out2

    def backward(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(ad.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ValueError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def split(t: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % t.ndim
    if builtins.sum(sizes) != t.shape[ax]:
        raise ValueError(f"split: sizes {list(sizes)} do not cover axis of {t.shape}")
    out, start = [], 0
    for n in sizes:
        index = [slice(None)] * t.ndim
        index[ax] = slice(start, start + n)
        out.append(getitem(t, tuple(index)))
        start += n
    return out


def getitem(t: Tensor, index) -> Tensor:
    shape, dtype = t.shape, t.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(t.data[index], (t,), backward, "getitem")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Rows of a 2-D table; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for table with {n} rows")
    return getitem(table, idx)


def pick(t: Tensor, indices) -> Tensor:
    """``t[..., indices]`` one entry per leading position: (B, N) -> (B,)."""
    idx = np.asarray(indices, dtype=np.intp)
    if t.ndim != 2 or idx.shape != (t.shape[0],):
        raise ValueError(f"pick: expected (B, N) with B indices, got {t.shape} and {idx.shape}")
    return getitem(t, (np.arange(t.shape[0]), idx))


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),), "reshape")


def expand(t: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition (explicit broadcast)."""
    ax = axis % (t.ndim + 1)
    data = np.repeat(np.expand_dims(t.data, ax), n, axis=ax)
    return _make(data, (t,), lambda g: (g.sum(axis=ax),), "expand")


def transpose(t: Tensor) -> Tensor:
    return _make(np.swapaxes(t.data, -1, -2), (t,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _make(y, (t,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # saturated values round to the nearest float inside (0, 1), keeping the open range exact
    info = np.finfo(y.dtype)
    y = np.clip(y, info.smallest_subnormal, np.nextafter(y.dtype.type(1), y.dtype.type(0)))
    return _make(y, (t,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(t: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = t.data > 0
    return _make(t.data * mask, (t,), lambda g: (g * mask,), "relu")


def exp(t: Tensor) -> Tensor:
    y = np.exp(t.data)
    return _make(y, (t,), lambda g: (g * y,), "exp")


def log(t: Tensor) -> Tensor:
    x = t.data
    with np.errstate(divide="ignore"):
        y = np.log(x)
    return _make(y, (t,), lambda g: (g / x,), "log")


def sum(t: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = t.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(t.data.sum(axis=axis)), (t,), backward, "sum")


def mean(t: Tensor, axis=None) -> Tensor:
    n = t.data.size if axis is None else t.shape[axis]
    return mul(sum(t, axis), 1.0 / n)


def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax: non-finite logits")
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"softmax: mask shape {mask.shape} vs logits {x.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("softmax: a row has no unmasked entries")
    return np.where(mask, x, -np.inf)


def softmax(t: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get exactly 0."""
    x = _masked_logits(t.data, mask)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (t,), backward, "softmax")


def log_softmax(t: Tensor, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked entries are -inf with zero gradient."""
    x = _masked_logits(t.data, mask)
    shifted = x - x.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def backward(g):
        g = np.where(np.isfinite(y), g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (t,), backward, "log_softmax")


class ParamStore(OrderedDict):
    """Named trainable tensors in insertion order."""

    def add(self, name: str, data) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self[name] = t
        return t

    def num_params(self) -> int:
        return int(np.sum([t.data.size for t in self.values()]))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.items():
            out.add(k, t.data.copy())
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, t in self.items():
            out.add(k, t.data.astype(dtype))
        return out


def reverse_gradient(loss: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    """d(loss)/d(param) for every parameter; unreached parameters get zeros."""
    if loss.data.size != 1:
        raise ValueError(f"reverse_gradient needs a scalar loss, got shape {loss.shape}")
    grads = backprop(loss) if loss.requires_grad else {}
    out = {}
    for name, p in params.items():
        g = grads.get(p)
        out[name] = np.zeros_like(p.data) if g is None else g
    return out


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{name:28s} {err:.3e}" for name, err in self.max_rel_error.items()]
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} entries)"
        lines.append(f"max relative error {self.worst:.3e} (tol {self.tolerance:g}) {status}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor absorbs round-off on near-zero entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    names: Iterable[str] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(params)`` to central differences.

    ``f`` must be deterministic. Every entry of every (selected) parameter is
    perturbed in place and restored.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic = reverse_gradient(f(params), params)
    report = GradCheckReport(tolerance=tolerance)
    for name in names if names is not None else list(params):
        p = params[name].data
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float(f(params).data)
                flat[i] = orig - epsilon
                down = float(f(params).data)
                flat[i] = orig
                num_flat[i] = (up - down) / (2.0 * epsilon)
        err = relative_error(analytic[name], numeric, floor)
        if err.size:
            worst = np.unravel_index(int(np.argmax(err)), err.shape)
            report.max_rel_error[name] = float(err[worst])
            report.worst_index[name] = tuple(int(i) for i in worst)
            for idx in zip(*np.nonzero(err > tolerance)):
                idx = tuple(int(i) for i in idx)
                report.failures.append((name, idx, float(analytic[name][idx]), float(numeric[idx])))
        else:
            report.max_rel_error[name] = 0.0
    return report
