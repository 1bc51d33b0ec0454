"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every differentiable op creates a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` orders the recorded graph topologically (the
"tape") and walks it once in reverse.

Broadcasting is limited on purpose: operands of elementwise ops must have
equal shapes, or one of them is a scalar, or a matrix is paired with a
vector matching its last axis (the vector is applied to every row).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread (inference mode)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out.grad = np.zeros_like(data)
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


# ----------------------------------------------------------------------
# elementwise arithmetic


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    # matrix-vector case: the vector was applied to every row
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


mul_elem = mul


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


tanh_elem = tanh


def sigmoid(x: Tensor) -> Tensor:
    # tanh form saturates cleanly instead of overflowing exp
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


sigmoid_elem = sigmoid


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ----------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-d operands act as row/column vectors like numpy's ``@``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")

    def fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _result(np.asarray(ad @ bd), (a, b), fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat: nothing to concatenate")
    ndim = parts[0].ndim
    ax = axis % ndim if ndim else 0
    for p in parts[1:]:
        other = [s for i, s in enumerate(p.shape) if i != ax]
        first = [s for i, s in enumerate(parts[0].shape) if i != ax]
        if p.ndim != ndim or other != first:
            raise DimensionError(
                f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return np.split(g, splits, axis=ax)

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, fn, "concat")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """``[a, b]`` along the feature axis."""
    return concat([a, b], axis=-1)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("stack: nothing to stack")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {p.shape} differ")
    return _result(np.stack([p.data for p in parts]), parts, lambda g: list(g), "stack")


def getitem(x: Tensor, key) -> Tensor:
    """Indexing (ints, slices, integer arrays); repeated indices accumulate gradient."""
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), fn, "getitem")


def take_rows(x: Tensor, idx) -> Tensor:
    return getitem(x, np.asarray(idx, dtype=np.intp))


def gather(x: Tensor, rows, cols) -> Tensor:
    """Vector of ``x[rows[i], cols[i]]``."""
    return getitem(x, (np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)))


# ----------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    if n == 0:
        raise ContractError("mean_all: empty tensor")
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reduce_max_rows(m: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-row maximum of a matrix plus the argmax columns.

    Ties go to the lowest column index and only that cell receives gradient.
    """
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ContractError(f"reduce_max_rows: need a non-empty matrix, got shape {m.shape}")
    idx = np.argmax(m.data, axis=1)
    rows = np.arange(m.shape[0])
    shape = m.shape

    def fn(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _result(m.data[rows, idx].copy(), (m,), fn, "rowmax"), idx


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize each row (or the vector itself when 1-d)."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True)) + eps
    y = x.data / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), fn, "normalize")


# ----------------------------------------------------------------------
# backward pass


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of nodes reachable from ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor ``t``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ----------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias-corrected moments over a named parameter mapping."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, state: AdamState | None = None):
        self.params = dict(params)
        if state is None:
            state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for name, p in self.params.items():
                state.first_moment[name] = np.zeros_like(p.data)
                state.second_moment[name] = np.zeros_like(p.data)
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        s = self.state
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params.items():
            g = p.grad
            m = s.first_moment[name]
            v = s.second_moment[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.data -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    Adam(params, state.lr, state=state).step()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
