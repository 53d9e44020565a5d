"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node carrying its parents and a
closure that pushes the output gradient back to them.  Nodes are stamped
with a global sequence number at creation, so ``backward`` can replay the
tape in exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12
_seq = itertools.count()
_mode = {"strict": True}
_default_dtype = {"dtype": np.float64}


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def training_mode():
    """Clamp log/div arguments to ``EPS`` instead of raising."""
    prev = _mode["strict"]
    _mode["strict"] = False
    try:
        yield
    finally:
        _mode["strict"] = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype["dtype"]
    _default_dtype["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype["dtype"] = prev


def is_strict() -> bool:
    return _mode["strict"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq)
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op or 'leaf'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype["dtype"]), requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    denom = b.data
    if np.any(denom == 0):
        if is_strict():
            raise DomainError("div: zero in denominator")
        denom = np.where(denom == 0, EPS, denom)
    out = a.data / denom

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / denom, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / denom, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        if is_strict():
            raise DomainError(f"log: non-positive argument (min {x.min():.3g})")
        x = np.maximum(x, EPS)
    return _make(np.log(x), (a,), lambda g: _accum(a, g / x), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * 0.5 / out), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: _accum(a, g * np.cos(a.data)), "sin")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(a.data * on, (a,), lambda g: _accum(a, g * on), "relu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    if op_kind == "scale":
        return scale(a, float(b.data if isinstance(b, Tensor) else b))
    fn = _ELEMENTWISE.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    if op_kind in ("exp", "log", "neg"):
        return fn(a)
    return fn(a, b)


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size // max(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size, 1)
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)), "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), bw, "index")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for k, t in enumerate(ts):
            _accum(t, np.take(g, k, axis=axis))

    return _make(out, ts, bw, "stack")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------------------
# fused normalizations


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def logsumexp(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Log-sum-exp along ``axis`` restricted to entries where ``mask`` is true.

    Rows with no selected entries yield 0 and receive no gradient.
    """
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(mask, x.shape)
    big = np.where(mask, x.data, -np.inf)
    m = big.max(axis=axis, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.where(mask, np.exp(big - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    safe = np.where(empty, 1.0, s)
    out = np.where(empty, 0.0, m + np.log(safe))
    w = e / safe

    def bw(g):
        _accum(x, np.expand_dims(g, axis) * w)

    return _make(np.squeeze(out, axis=axis), (x,), bw, "logsumexp")


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if axis not in (-1, x.ndim - 1):
        x_moved = transpose(x, _move_last(x.ndim, axis))
        out = layer_norm(x_moved, gain, bias, -1, eps)
        return transpose(out, tuple(np.argsort(_move_last(x.ndim, axis))))
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} must be ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), bw, "layer_norm")


def _move_last(ndim: int, axis: int) -> tuple:
    axis %= ndim
    return tuple(i for i in range(ndim) if i != axis) + (axis,)


def l2_normalize(x, eps: float = EPS) -> Tensor:
    """Rescale the last axis to unit length, ``x / max(|x|, eps)``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = norm < eps
    d = np.where(clamped, eps, norm)
    out = x.data / d

    def bw(g):
        radial = np.where(clamped, 0.0, (g * out).sum(axis=-1, keepdims=True))
        _accum(x, (g - out * radial) / d)

    return _make(out, (x,), bw, "l2_normalize")


def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: feature dims differ, {a.shape} vs {b.shape}")
    return tsum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows: ``[..., m, D] x [..., n, D] -> [..., m, n]``."""
    return matmul(l2_normalize(a), swap_last(l2_normalize(b)))


# --------------------------------------------------------------------------
# recurrent cell


def gru_cell(x, h, params: dict) -> Tensor:
    """Gated recurrent update.

    ``params`` holds ``w_ih`` [D_in, 3H], ``w_hh`` [H, 3H], ``b_ih`` and
    ``b_hh`` [3H]; gate blocks are ordered (reset, update, candidate).
    Output is ``(1 - u) * h + u * candidate``.
    """
    x, h = as_tensor(x), as_tensor(h)
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: input {x.shape} and hidden {h.shape} must be [B, D] with equal B")
    hid = h.shape[1]
    if params["w_hh"].shape != (hid, 3 * hid) or params["w_ih"].shape != (x.shape[1], 3 * hid):
        raise ShapeError(f"gru_cell: parameter shapes do not match input {x.shape} / hidden {h.shape}")
    gi = linear(x, params["w_ih"], params["b_ih"])
    gh = linear(h, params["w_hh"], params["b_hh"])
    r = sigmoid(gi[:, :hid] + gh[:, :hid])
    u = sigmoid(gi[:, hid : 2 * hid] + gh[:, hid : 2 * hid])
    cand = tanh(gi[:, 2 * hid :] + r * gh[:, 2 * hid :])
    return h + u * (cand - h)


# --------------------------------------------------------------------------
# tape


class Tape:
    """Reachable graph of a scalar output, ordered by execution."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = {id(out)}
        stack_ = [out]
        nodes = []
        while stack_:
            t = stack_.pop()
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack_.append(p)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if not t._parents]

    def backward(self, seed: np.ndarray) -> None:
        for t in self.nodes:
            t.grad = np.zeros_like(t.data) if not t._parents else None
        self.nodes[-1].grad = seed
        for t in reversed(self.nodes):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def backward(loss: Tensor) -> Tape:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([loss])
    tape = Tape.from_output(loss)
    tape.backward(np.ones_like(loss.data))
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(np.asarray(f(base.copy())))
        flat[k] = orig - h
        fm = float(np.asarray(f(base.copy())))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))
