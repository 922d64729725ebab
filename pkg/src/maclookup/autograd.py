"""Reverse-mode automatic differentiation on top of numpy arrays.

A :class:`Tensor` wraps an ``ndarray``.  While a :class:`Tape` is active on the
current thread, every op whose inputs require gradients appends a node holding
its parents and a closure that maps the output gradient to parent gradients.
``Tape.backward`` replays those nodes in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "current_tape",
    "get_dtype",
    "set_precision",
    "precision",
    "as_tensor",
    "parameter",
]

_PRECISIONS = {"float32": np.float32, "float64": np.float64, 32: np.float32, 64: np.float64}

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (no tape, non-scalar loss, reuse)."""


class NonFiniteError(FloatingPointError):
    """Raised as soon as an op produces NaN or infinity."""


def get_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


def set_precision(p) -> None:
    """Set the default float type for new tensors on this thread (32 or 64 bit)."""
    try:
        _local.dtype = _PRECISIONS[p]
    except KeyError:
        raise ValueError(f"unsupported precision {p!r}; use 'float32' or 'float64'") from None


@contextmanager
def precision(p):
    old = get_dtype()
    set_precision(p)
    try:
        yield
    finally:
        _local.dtype = old


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array that can take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # Arithmetic is delegated to maclookup.ops, bound below to avoid an import cycle.


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_dtype()))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager; nested tapes shadow outer ones. A tape is owned by
    the thread that entered it.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - only on misuse across threads
            raise TapeError("tape exited out of order")

    def record(self, out: Tensor, parents: Sequence[Tensor], fn: Callable, op: str) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); open a new tape")
        self.nodes.append(_Node(out, tuple(parents), fn, op))
        self._produced.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None):
        """Propagate d(loss) back through the recorded nodes.

        Leaf tensors with ``requires_grad`` get their gradient added into
        ``.grad``.  Returns a dict ``{tensor: grad}`` for every reached leaf, or,
        when ``wrt`` is given, a list aligned with ``wrt`` in which tensors not
        connected to ``loss`` receive zeros.
        """
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != {p.data.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if id(p) not in self._produced:
                    leaves[key] = p

        self.nodes.clear()
        self._produced.clear()
        self._consumed = True

        result = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            if not _all_finite(g):
                raise NonFiniteError(f"non-finite gradient for {leaf!r}")
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        if wrt is None:
            return result
        return [result.get(t, np.zeros_like(t.data)) for t in wrt]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Run backward on the active tape of this thread."""
    tape = current_tape()
    if tape is None:
        raise TapeError("backward() called without an active tape")
    return tape.backward(loss, wrt)


def _all_finite(a: np.ndarray) -> bool:
    # a finite sum implies finite elements; only fall back to the full scan otherwise
    if np.isfinite(np.add.reduce(a, axis=None)):
        return True
    return bool(np.isfinite(a).all())


def make_result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    """Wrap an op result, enforce finiteness, and record it on the active tape."""
    if not _all_finite(data):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, fn, op)
    return out
