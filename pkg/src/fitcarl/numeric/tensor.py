"""Dense tensors recorded on a reverse-mode tape."""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"double": np.float64, "single": np.float32}
_dtype = _DTYPES[os.environ.get("FITCARL_PRECISION", "double")]
_debug = os.environ.get("FITCARL_DEBUG", "0") == "1"

_tape_stack: list["Tape"] = []


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


def set_debug(flag: bool) -> None:
    global _debug
    _debug = bool(flag)


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it.

    Leaves created with ``requires_grad=True`` are parameters. Results of
    operations executed while a :class:`Tape` is active and that depend on a
    parameter are themselves differentiable.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Records primitive operations in execution order.

    Use as a context manager; operations run inside the block are recorded
    when at least one input is differentiable.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. ``params`` (zeros where unreached)."""
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g.reshape(p.shape).astype(p.data.dtype, copy=False))
        return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.gradients(loss, params)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class no_grad:
    """Suspend recording, e.g. during beam search."""

    def __enter__(self):
        _tape_stack.append(None)  # type: ignore[arg-type]

    def __exit__(self, *exc):
        _tape_stack.pop()


def record(out_data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``out_data`` and, if needed, put a backward closure on the active tape."""
    parents = tuple(parents)
    if _debug and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, parents, backward, op))
    return out
