"""Dense tensors and the reverse-mode gradient tape.

Tensors are immutable once constructed (backing array is marked
read-only), so they can be shared freely across threads. A GradGraph is
single-threaded: enter it as a context manager on the thread doing the
training step, run ops, then call backward().

Training math runs in float32; gradient-check builds select float64 at
construction time.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable dense array with shape, row-major float32/float64 data."""

    __slots__ = ("data", "name")

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, Tensor):
                dtype = data.dtype
            elif isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
        src = data.data if isinstance(data, Tensor) else data
        arr = np.array(src, dtype=dtype, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: Optional[str] = None) -> "Tensor":
        """Take ownership of a freshly computed array without copying."""
        t = object.__new__(cls)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _check_shape(arr.shape)
        arr.flags.writeable = False
        t.data = arr
        t.name = name
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == np.dtype(dtype):
            return self
        return Tensor._wrap(self.data.astype(dtype), name=self.name)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    # Arithmetic sugar; the functional API in fedbot.ops is the real surface.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _coerce(other, self))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _coerce(other, self))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _coerce(other, self))


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.dtype)


def _check_shape(shape: Sequence[int]) -> None:
    if len(shape) == 0:
        raise ShapeError("tensor shape must be non-empty")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every dimension must be >= 1, got {tuple(shape)}")


class Node:
    """One recorded primitive op: inputs, output, and its backward rule.

    backward(grad_out) returns one gradient array (or None) per input.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]],
    ):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE = threading.local()


class GradGraph:
    """Tape of primitive ops in application (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradGraph":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.stack.pop()
        return False

    @staticmethod
    def current() -> Optional["GradGraph"]:
        stack = getattr(_ACTIVE, "stack", None)
        return stack[-1] if stack else None

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Accumulate gradients from a scalar loss back to named parameters.

        Returns gradients keyed by parameter name; unnamed leaves are
        walked but not reported.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones(loss.shape, dtype=loss.dtype)
        }
        for node in reversed(self.nodes):
            out_grad = grads.get(id(node.output))
            if out_grad is None:
                continue
            in_grads = node.backward(out_grad)
            for tensor, grad in zip(node.inputs, in_grads):
                if grad is None:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(
                        f"backward of {node.op} produced gradient shape "
                        f"{grad.shape} for input of shape {tensor.shape}"
                    )
                seen = grads.get(id(tensor))
                if seen is None:
                    grads[id(tensor)] = grad
                else:
                    grads[id(tensor)] = seen + grad
        self._grads = grads
        named: dict[str, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.name is not None and id(tensor) in grads:
                    named.setdefault(tensor.name, Tensor._wrap(grads[id(tensor)]))
        return named

    def grad_of(self, tensor: Tensor) -> Optional[Tensor]:
        """Gradient of the last backward() w.r.t. any tensor on the tape."""
        grad = self._grads.get(id(tensor))
        return None if grad is None else Tensor._wrap(grad)
