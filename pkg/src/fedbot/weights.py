"""Ordered, named tensor collections: the unit exchanged between nodes."""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class ModelWeights:
    """Immutable ordered mapping name -> Tensor.

    Iteration order is the construction order and is identical across
    processes for the same model config, which the wire format and the
    aggregation math both rely on.
    """

    __slots__ = ("_names", "_by_name")

    def __init__(self, items: Iterable[tuple[str, Tensor]]):
        names: list[str] = []
        by_name: dict[str, Tensor] = {}
        for name, tensor in items:
            if name in by_name:
                raise ContractError(f"duplicate weight name {name!r}")
            if tensor.name != name:
                tensor = Tensor._wrap(tensor.data, name=name)
            names.append(name)
            by_name[name] = tensor
        self._names = tuple(names)
        self._by_name = by_name

    def names(self) -> tuple[str, ...]:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        for name in self._names:
            yield name, self._by_name[name]

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ModelWeights":
        return ModelWeights((name, fn(name, t)) for name, t in self)

    def astype(self, dtype) -> "ModelWeights":
        return self.map(lambda _, t: t.astype(dtype))

    def total_scalars(self) -> int:
        return sum(t.size for _, t in self)

    @property
    def dtype(self):
        return self._by_name[self._names[0]].dtype

    def same_layout(self, other: "ModelWeights") -> bool:
        return self._names == other._names and all(
            self[n].shape == other[n].shape for n in self._names
        )

    def bit_equal(self, other: "ModelWeights") -> bool:
        """True when names, shapes, dtypes and raw bytes all match."""
        if self._names != other._names:
            return False
        for name in self._names:
            a, b = self[name].data, other[name].data
            if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        return True

    def allclose(self, other: "ModelWeights", rtol=1e-6, atol=1e-8) -> bool:
        return self._names == other._names and all(
            np.allclose(self[n].data, other[n].data, rtol=rtol, atol=atol)
            for n in self._names
        )

    def __repr__(self) -> str:
        return f"ModelWeights({len(self._names)} tensors, {self.total_scalars()} scalars)"
