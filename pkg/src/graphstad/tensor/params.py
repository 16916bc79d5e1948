"""Named, ordered parameter collections and weight initialization."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype

# names with these suffixes are statistics, not trainable parameters
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


class ParamSet:
    """Ordered map name -> Tensor. Insertion order is the iteration order."""

    def __init__(self):
        self._items: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable and not self.is_buffer(name))
        self._items[name] = t
        return t

    @staticmethod
    def is_buffer(name: str) -> bool:
        return name.endswith(_BUFFER_SUFFIXES)

    @staticmethod
    def is_weight(name: str) -> bool:
        """Weight matrices/kernels subject to L2 decay (excludes biases and BN terms)."""
        leaf = name.rsplit(".", 1)[-1]
        return leaf in ("weight", "w_ih", "w_hh")

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self) -> list[str]:
        return list(self._items)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._items.items() if t.requires_grad]

    def weights(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._items.items() if self.is_weight(n)]

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._items.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._items) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for n, t in self._items.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)

    def cast(self, dtype) -> None:
        for t in self._items.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.trainable())


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


def uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=default_dtype())


def ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=default_dtype())
