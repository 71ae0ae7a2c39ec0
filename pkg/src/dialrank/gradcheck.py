"""Finite-difference gradient oracle, independent of the tape."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, clear_tape, no_grad


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                       richardson: bool = False) -> np.ndarray:
    """Central differences of ``f`` with respect to the array ``x`` (perturbed in place).

    With ``richardson`` the estimate combines steps ``eps`` and ``eps/2``,
    cancelling the O(eps^2) truncation term.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)

    def central(i, h):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        return (hi - lo) / (2 * h)

    for i in range(flat.size):
        d = central(i, eps)
        if richardson:
            d = (4 * central(i, eps / 2) - d) / 3
        out[i] = d
    return grad


def relative_error(auto: np.ndarray, numeric: np.ndarray) -> float:
    """max |auto - numeric| / (|numeric| + 1e-8) over entries."""
    if auto.size == 0:
        return 0.0
    return float(np.max(np.abs(auto - numeric) / (np.abs(numeric) + 1e-8)))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor] | Iterable[Tensor],
                    eps: float = 1e-5, richardson: bool = False) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` with finite differences.

    Returns the relative error per tensor (keyed by name, or index for a list).
    """
    named = dict(tensors) if isinstance(tensors, dict) else {str(i): t for i, t in enumerate(tensors)}
    clear_tape()
    for t in named.values():
        t.grad = None
    loss = loss_fn()
    backward(loss)
    auto = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for k, t in named.items()}
    clear_tape()

    def f() -> float:
        with no_grad():
            return loss_fn().item()

    # data may be a read-only view; give each tensor its own writable buffer
    for t in named.values():
        if not t.data.flags.writeable:
            t.data = t.data.copy()
    return {k: relative_error(auto[k], numerical_gradient(f, t.data, eps, richardson))
            for k, t in named.items()}
