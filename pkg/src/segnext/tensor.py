"""4-D tensor value type and the reverse-mode gradient tape."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract."""


class GraphError(RuntimeError):
    """A gradient computation was requested on an invalid graph."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense NCHW array of float32, or float64 in verification mode.

    Tensors are treated as immutable once created: operations return new
    tensors and never write into their operands. The one sanctioned
    exception is an optimizer updating a parameter's ``data`` in place,
    which must not race with a concurrent forward pass.

    Vector-like learnable values (biases, norm scales, layer scales) are
    carried as shape (1, C, 1, 1) so that every value in the system is
    the same 4-D type.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (N, C, H, W), got {arr.ndim}-D shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """Copy with no grad requirement (fresh buffer)."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        grad = " grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}{grad}{tag})"


def full_like(t: Tensor, value: float) -> Tensor:
    return Tensor(np.full(t.shape, value, dtype=t.dtype))


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


# A node remembers the op's output and inputs (strong references, so object
# identity stays unique for the life of the tape) plus a closure that maps the
# output adjoint to one adjoint per input (None where an input needs none).
_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE_TAPE: "GradTape | None" = None


class GradTape:
    """Ordered record of executed operations, replayed in reverse for adjoints.

    Use as a context manager around the forward computation::

        with GradTape() as tape:
            loss = ...
        grads = backward(tape, loss)

    Only one tape may record at a time; a tape is confined to a single
    logical execution stream.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], _BackwardFn]] = []
        self._produced: set[int] = set()
        self._relevant: set[int] = set()

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise GraphError("a gradient tape is already recording; tapes cannot nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: _BackwardFn) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))
        self._relevant.add(id(out))

    def _wants(self, inputs: Iterable[Tensor]) -> bool:
        """Whether an op over these inputs can influence any gradient."""
        rel = self._relevant
        for t in inputs:
            if t.requires_grad or id(t) in rel:
                return True
        return False


def record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: _BackwardFn) -> Tensor:
    """Register an executed op on the active tape, if one is recording.

    No-op (and no overhead beyond the check) outside a tape or when none of
    the inputs can affect a gradient.
    """
    tape = _ACTIVE_TAPE
    if tape is not None and tape._wants(inputs):
        tape._record(out, inputs, backward_fn)
    return out


def recording() -> bool:
    return _ACTIVE_TAPE is not None


def grad_relevant(t: Tensor) -> bool:
    """Whether ``t`` can receive a gradient on the currently recording tape.

    True for parameters and tape-produced intermediates; False for constants,
    letting ops skip computing adjoints no one will read.
    """
    if t.requires_grad:
        return True
    tape = _ACTIVE_TAPE
    return tape is not None and id(t) in tape._relevant


class Gradients:
    """Gradient lookup produced by :func:`backward`.

    ``of(t)`` returns the accumulated adjoint of ``t``; parameters that never
    influenced the loss get exact zeros.
    """

    def __init__(self, adjoints: dict[int, np.ndarray]) -> None:
        self._adjoints = adjoints

    def of(self, t: Tensor) -> np.ndarray:
        g = self._adjoints.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def has(self, t: Tensor) -> bool:
        return id(t) in self._adjoints


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Replay the tape in exact reverse order, accumulating adjoints.

    A tensor consumed k times receives the sum of its k adjoint
    contributions. Two calls over the same tape are bitwise identical.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if id(loss) not in tape._produced:
        raise GraphError("loss was not produced by an operation recorded on this tape")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        out_adj = adjoints.get(id(out))
        if out_adj is None:
            continue  # not on the path from loss
        for inp, grad in zip(inputs, backward_fn(out_adj)):
            if grad is None:
                continue
            key = id(inp)
            prior = adjoints.get(key)
            adjoints[key] = grad if prior is None else prior + grad
        if not out.requires_grad and id(out) != id(loss):
            # Adjoints of produced intermediates are complete once their
            # producer has run; drop them to bound peak memory.
            del adjoints[id(out)]
    return Gradients(adjoints)
