"""Named trainable parameters and initializers."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered mapping ``name -> Tensor`` (all requiring grad).

    Names are dotted paths such as ``"enc.lstm_q.W_ih"``; insertion order is
    the checkpoint order.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def with_prefix(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self._params.items()}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


def add_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W", xavier(rng, n_in, n_out))
    store.add(f"{prefix}.b", np.zeros(n_out))
