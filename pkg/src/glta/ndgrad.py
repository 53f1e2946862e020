"""Dense tensors with tape-based reverse-mode differentiation and Adam.

Every trainable parameter in the package is a :class:`Tensor` from this
module. Operations executed while any input requires a gradient are recorded
on the active :class:`Tape`; :func:`backward` replays that record in reverse.

Training runs in float32. Gradient checks switch to float64 with
:func:`float64_mode` so central finite differences are meaningful.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5

_state = {"dtype": np.float32, "grad_enabled": True, "debug": False}


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericDomainError(FloatingPointError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode():
    """Create and compute tensors in float64 inside the block."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks on every op input."""
    _state["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=default_dtype()))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # op outputs keep the dtype numpy computed; skips the cast in __init__
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(data)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations.

    Use as a context manager to make it the active tape; otherwise ops go to
    the module-level default tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev: Tape | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents, backward) -> None:
        node = _Node(out, tuple(parents), backward)
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        self._prev = None
        return False


_default_tape = Tape()
_active_tape = _default_tape


def active_tape() -> Tape:
    return _active_tape


def _check_finite(arrs):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError("non-finite value in op input")


def custom_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and register its backward rule.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent, each
    shaped like that parent.
    """
    if _state["debug"]:
        _check_finite([p.data for p in parents])
    out = Tensor._wrap(value)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _active_tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad``; the tape is cleared
    afterwards unless ``retain_tape`` is set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = _active_tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        pgrads = node.backward(g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                seen[key] = parent
    for key, g in grads.items():
        t = seen[key]
        if t.is_leaf:
            t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g
    if not retain_tape:
        tape.clear()


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {sa} and {sb}") from None
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {sa} and {sb}") from None
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {sa} and {sb}") from None

    def bw(g):
        return (_unbroadcast(g * b.data, sa) if a.requires_grad else None,
                _unbroadcast(g * a.data, sb) if b.requires_grad else None)

    return custom_op(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), sa) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), sb) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return custom_op(np.asarray(out), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    src = x.shape
    return custom_op(np.asarray(x.data.mean()), (x,),
                     lambda g: (np.full(src, g / n, dtype=x.data.dtype),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return custom_op(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows of a 2-D tensor picked by an integer array of any shape."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(index, dtype=np.int64)
    out = x.data[idx]
    n, d = x.shape

    def bw(g):
        acc = np.zeros((n, d), dtype=g.dtype)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, d))
        return (acc,)

    return custom_op(out, (x,), bw)


# ------------------------------------------------------------- nonlinearities

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * dinner),)

    return custom_op(out.astype(v.dtype), (x,), bw)


def logsigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.where(v >= 0, -np.log1p(np.exp(-np.abs(v))), v - np.log1p(np.exp(-np.abs(v))))
    sig_neg = 1.0 / (1.0 + np.exp(v))
    return custom_op(out.astype(v.dtype), (x,), lambda g: (g * sig_neg,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    v = x.data
    d = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents: list[Tensor] = [x]
    out = xhat
    if gamma is not None:
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        out = out + beta.data
        parents.append(beta)

    def bw(g):
        gx = g * gamma.data if gamma is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gamma is not None:
            res.append((g * xhat).reshape(-1, d).sum(axis=0).reshape(gamma.shape))
        if beta is not None:
            res.append(g.reshape(-1, d).sum(axis=0).reshape(beta.shape))
        return res

    return custom_op(out.astype(v.dtype, copy=False), tuple(parents), bw)


# ----------------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax.

    With ``weights`` the per-row losses are combined as a weighted sum
    instead of a plain mean.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {t.shape[0]} targets")
    bad = np.flatnonzero((t < 0) | (t >= c))
    if bad.size:
        r = int(bad[0])
        raise IndexError(f"target {int(t[r])} at row {r} outside [0, {c})")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w.astype(logits.data.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, t]
    out = np.asarray((w * nll).sum(), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (w[:, None] * g),)

    return custom_op(out, (logits,), bw)


# ------------------------------------------------------------------------ adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_for(self, params: Sequence[Tensor]) -> "AdamState":
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0
        return self


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place; zeroes grads afterwards."""
    if not state.m:
        state.init_for(params)
    if len(state.m) != len(params):
        raise ContractError(f"Adam state tracks {len(state.m)} params, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


class Adam:
    """Thin holder pairing a parameter list with its :class:`AdamState`."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps).init_for(self.params)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
