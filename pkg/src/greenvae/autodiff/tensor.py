"""Tensor type and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = contextvars.ContextVar("greenvae_default_dtype", default=np.float32)
_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "greenvae_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for tensors built from Python values."""
    token = _DEFAULT_DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


def shadow64():
    """64-bit shadow mode: constants and new tensors are float64."""
    return default_dtype(np.float64)


class Tensor:
    """Dense row-major array with optional gradient tracking.

    A tensor is *tracked* when it is a leaf created with ``requires_grad=True``
    or when it is the output of an operation recorded on the active tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, (bool, int, float)) and not isinstance(data, np.generic):
            # bare python scalars must not promote float32 operands
            dtype = get_default_dtype()
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # --- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operator sugar (implemented in ops) ----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of operations, in execution (hence topological) order.

    Use as a context manager; operations on tracked tensors executed inside
    the block are recorded.  Outside any tape, operations run untracked.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> "Gradients":
        return backward(self, loss, params)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


class Gradients:
    """Mapping from leaf tensors to their gradient arrays."""

    def __init__(self) -> None:
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def _set(self, tensor: Tensor, grad: np.ndarray) -> None:
        self._grads[id(tensor)] = grad
        self._tensors[id(tensor)] = tensor

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        return self._grads[id(tensor)]

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        for key, grad in self._grads.items():
            yield self._tensors[key], grad


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> Gradients:
    """Reverse sweep over ``tape`` seeded at the scalar ``loss``.

    Every leaf with ``requires_grad`` met on the tape (plus any in ``params``)
    gets ``.grad`` set; leaves the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.node is None:
                leaves[id(inp)] = inp
    for p in params or ():
        leaves[id(p)] = p
    if loss.requires_grad and loss.node is None:
        leaves[id(loss)] = loss

    buf: dict[int, np.ndarray] = {}
    if loss.tracked:
        buf[id(loss)] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = buf.pop(id(node.output), None) if node.output.node is node else None
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.tracked:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"{node.kind} backward produced grad {gi.shape} for input {inp.shape}"
                )
            key = id(inp)
            if key in buf:
                buf[key] = buf[key] + gi
            else:
                buf[key] = gi

    grads = Gradients()
    for key, leaf in leaves.items():
        g = buf.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g
        grads._set(leaf, g)
    return grads
