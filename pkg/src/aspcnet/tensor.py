"""Dense tensors and the reverse-mode tape.

A :class:`Tensor` wraps a row-major numpy array. Operations in
:mod:`aspcnet.ops` (and the sampling/capsule primitives built on the same
machinery) record a :class:`Node` on the innermost active :class:`Tape`
whenever one of their inputs requires a gradient. Outside a tape nothing is
recorded, which is how inference runs.

    >>> from aspcnet import ops
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = ops.sum(ops.mul(x, x))
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.float32
_debug = False
_tape_stack: list["Tape"] = []


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Select the working precision (``"f32"``, ``"f64"`` or a numpy dtype)."""
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


def _resolve_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unknown precision {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    return dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default precision."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = _resolve_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


def set_debug(flag: bool) -> None:
    """Enable finite-value checks after every primitive."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


@contextlib.contextmanager
def debug_mode(flag: bool = True) -> Iterator[None]:
    global _debug
    old = _debug
    _debug = flag
    try:
        yield
    finally:
        _debug = old


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        dt = _resolve_dtype(dtype) if dtype is not None else _default_dtype
        arr = np.asarray(data)
        if arr.dtype != dt:
            arr = arr.astype(dt)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # weak, so a dropped tape frees its graph without a cycle collection
        self._tape: Optional[weakref.ref] = None

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; ops imports this module so the import is deferred.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axes, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: VJP):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so the list is already in
    topological order. Use as a context manager; tapes nest and the
    innermost one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tensor that requires one.

        Leaves accumulate into an existing ``.grad``; intermediates receive
        the gradient of this pass. Leaves recorded on the tape but not
        reachable from ``loss`` get zeros.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(
                        f"{node.op}: gradient shape {gi.shape} does not match input {t.shape}"
                    )
                if gi.dtype != t.data.dtype:
                    gi = gi.astype(t.data.dtype)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def current_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``out_data`` and, if needed, register its backward rule."""
    if _debug and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = weakref.ref(tape)
        tape.record(Node(op, inputs, out, vjp))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Run the backward pass of ``tape`` (default: the tape that produced ``loss``)."""
    if tape is None and loss._tape is not None:
        tape = loss._tape()
    if tape is None:
        tape = current_tape()
    if tape is None:
        raise RuntimeError("no tape recorded this computation")
    tape.backward(loss)
