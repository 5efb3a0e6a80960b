"""Dense tensor with reverse-mode gradients.

Every differentiable primitive produces its output through :func:`emit`, which
attaches a :class:`Node` carrying a monotonically increasing tape sequence
number.  Backward replays the nodes reachable from the loss in decreasing
sequence order, so each recorded op is visited exactly once and gradient
accumulation order is fixed.

A :class:`GradTape` can additionally be opened to keep a shape-level record of
every executed op (with or without gradients); the cost model consumes it.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from ..errors import UsageError

DEFAULT_DTYPE = np.float32

_uids = itertools.count()
_seqs = itertools.count()
_local = threading.local()


def _state():
    st = _local.__dict__
    if "grad_enabled" not in st:
        st["grad_enabled"] = True
        st["tapes"] = []
        st["scopes"] = []
    return _local


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Name scope attached to tape records (module path of the running layer)."""
    st = _state()
    st.scopes.append(name)
    try:
        yield
    finally:
        st.scopes.pop()


def current_scope() -> str:
    scopes = _state().scopes
    return scopes[-1] if scopes else ""


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "uid", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.uid = next(_uids)
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p: float):
        return _ops().power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from . import ops

    return ops


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """Recorded op: inputs, backward rule and tape position."""

    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, seq: int):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq


@dataclass
class OpRecord:
    seq: int
    op: str
    scope: str
    inputs: tuple[tuple[int, tuple[int, ...], int], ...]  # (uid, shape, itemsize)
    output: tuple[int, tuple[int, ...], int]
    attrs: dict = field(default_factory=dict)
    view: bool = False


class GradTape:
    """Ordered record of every op executed while the tape is open.

    >>> with GradTape() as tape:
    ...     y = ops.relu(x)
    >>> [r.op for r in tape.records]
    ['relu']
    """

    def __init__(self) -> None:
        self.records: list[OpRecord] = []

    def __enter__(self) -> "GradTape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.remove(self)

    def _record(self, seq, op, inputs, out, attrs, view):
        self.records.append(
            OpRecord(
                seq=seq,
                op=op,
                scope=current_scope(),
                inputs=tuple((t.uid, t.shape, t.data.itemsize) for t in inputs),
                output=(out.uid, out.shape, out.data.itemsize),
                attrs=dict(attrs),
                view=view,
            )
        )


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def result_dtype(inputs: Sequence[Tensor]) -> np.dtype:
    dt = np.dtype(np.float32)
    for t in inputs:
        if t.dtype == np.float64:
            dt = np.dtype(np.float64)
    return dt


def emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn | None,
         view: bool = False, **attrs) -> Tensor:
    """Wrap a primitive's forward result and record it."""
    inputs = tuple(inputs)
    dt = result_dtype(inputs)
    res = Tensor.__new__(Tensor)
    res.data = np.ascontiguousarray(out, dtype=dt)
    res.requires_grad = False
    res.grad = None
    res._node = None
    res.uid = next(_uids)
    res.name = None
    seq = next(_seqs)
    st = _state()
    if backward_fn is not None and st.grad_enabled and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res._node = Node(op, inputs, backward_fn, seq)
    for tape in st.tapes:
        tape._record(seq, op, inputs, res, attrs, view)
    return res


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not require grad; nothing was recorded")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        order.append(t)
        stack.extend(node.inputs)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = unbroadcast(np.asarray(gi), inp.shape).astype(inp.dtype, copy=False)
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
