"""Array-valued reverse-mode differentiation on a recording tape.

Operations executed while a :class:`Tape` is active append a node to it; the
backward pass walks those nodes in exactly the reverse of the order they were
recorded.  Outside a tape the same operations are plain numpy evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericFailure",
    "Tensor",
    "Tape",
    "parameter",
    "as_tensor",
    "active_tape",
]


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericFailure(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class Tensor:
    """A float64 array plus an optional parameter name.

    Tensors are value-like: operations never mutate their inputs.  Parameters
    (``name`` set) are the leaves gradients are reported for.
    """

    __slots__ = ("data", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    # Operator sugar; implementations live in functional.py.
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F

        return F.getitem(self, index)


def parameter(data, name: str) -> Tensor:
    if not name:
        raise ContractViolation("parameters need a non-empty name")
    return Tensor(np.array(data, dtype=np.float64, copy=True), name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    index: int
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records operations in forward order.

    Use as a context manager; :meth:`gradient` runs the backward pass.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op: str, output: Tensor, inputs: tuple, backward) -> None:
        self.nodes.append(Node(op, len(self.nodes), output, inputs, backward))

    def gradient(self, loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
        """Return d(loss)/d(param) keyed by parameter name.

        Parameters the loss does not depend on get a zero gradient.
        """
        if loss.data.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        params = list(params)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor):
                    continue
                if not np.all(np.isfinite(ig)):
                    raise NumericFailure(
                        f"non-finite gradient at node #{node.index} ({node.op})"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p.name] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
        return out


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def forward_backward(fn: Callable[[], Tensor], params: Iterable[Tensor]):
    """Evaluate ``fn`` under a fresh tape; return (loss value, gradient map)."""
    params = list(params)
    with Tape() as tape:
        loss = fn()
    return float(loss.data), tape.gradient(loss, params)
