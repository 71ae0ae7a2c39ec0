"""Image-history joint scorer: cross-attention fusion of objects and history rounds.

Object features ``V`` ([..., k, d]) and history features ``H`` ([..., r, d],
row 0 = caption) are matched through a similarity matrix, each side is
enriched with an attended summary of the other, and both enriched sets go
through the bilinear-pooling attention used by the image-only head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .image_only import MfbParams, add_mfb, attend, linear, mfb, score
from .params import ParamStore, add_linear
from .tensor import (Tensor, add, concat, expand, matmul, mul, reshape, slice_axis, softmax, take,
                     transpose)

MAX_DROPPED_ROUNDS = 3


def add_joint(store: ParamStore, prefix: str, d: int, d_m: int, m: int, rng: np.random.Generator) -> None:
    a = np.sqrt(6.0 / (3 * d + 1))
    store.add(f"{prefix}.w_s", rng.uniform(-a, a, size=3 * d))
    add_mfb(store, f"{prefix}.mfb_v", 3 * d, d, d_m, m, rng)
    add_mfb(store, f"{prefix}.mfb_h", 3 * d, d, d_m, m, rng)
    add_linear(store, f"{prefix}.fc_v", 3 * d, d, rng)
    add_linear(store, f"{prefix}.fc_h", 3 * d, d, rng)
    add_linear(store, f"{prefix}.fc_q", d, d, rng)
    add_linear(store, f"{prefix}.fc_f", 2 * d, d, rng)


def similarity(V: Tensor, H: Tensor, w_s: Tensor) -> Tensor:
    """S[i, j] = w_s . [V_i; H_j; V_i * H_j], shape ``[..., k, r]``."""
    d = V.shape[-1]
    if H.shape[-1] != d or w_s.shape != (3 * d,) or V.shape[:-2] != H.shape[:-2]:
        raise ShapeError(f"similarity: V {V.shape}, H {H.shape}, w_s {w_s.shape}")
    k, r = V.shape[-2], H.shape[-2]
    lead = V.shape[:-2]
    w_v = reshape(slice_axis(w_s, 0, d), (d, 1))
    w_h = reshape(slice_axis(w_s, d, 2 * d), (d, 1))
    w_vh = slice_axis(w_s, 2 * d, 3 * d)
    by_object = expand(matmul(V, w_v), lead + (k, r))
    by_round = expand(transpose(matmul(H, w_h)), lead + (k, r))
    cross = matmul(mul(V, expand(w_vh, V.shape)), transpose(H))
    return add(add(by_object, by_round), cross)


def fuse_history(V: Tensor, H: Tensor, S: Tensor) -> Tensor:
    """[H; V^h; H * V^h] with V^h = softmax over objects of S^T, times V.  ``[..., r, 3d]``."""
    _check_fusion(V, H, S)
    V_h = matmul(softmax(transpose(S), axis=-1), V)
    return concat([H, V_h, mul(H, V_h)], axis=-1)


def fuse_visual(V: Tensor, H: Tensor, S: Tensor) -> Tensor:
    """[V; H^v; V * H^v] with H^v = softmax over rounds of S, times H.  ``[..., k, 3d]``."""
    _check_fusion(V, H, S)
    H_v = matmul(softmax(S, axis=-1), H)
    return concat([V, H_v, mul(V, H_v)], axis=-1)


def _check_fusion(V: Tensor, H: Tensor, S: Tensor) -> None:
    if S.shape != V.shape[:-1] + (H.shape[-2],) or V.shape[-1] != H.shape[-1]:
        raise ShapeError(f"fusion: V {V.shape}, H {H.shape}, S {S.shape}")


def joint_forward(V: Tensor, H: Tensor, q: Tensor, A: Tensor, store: ParamStore,
                  prefix: str = "joint") -> Tensor:
    S = similarity(V, H, store[f"{prefix}.w_s"])
    V_f = fuse_visual(V, H, S)
    H_f = fuse_history(V, H, S)
    mfb_v = MfbParams.from_store(store, f"{prefix}.mfb_v")
    mfb_h = MfbParams.from_store(store, f"{prefix}.mfb_h")
    v_f, _ = attend(mfb(V_f, q, mfb_v), V_f, mfb_v.L)
    h_f, _ = attend(mfb(H_f, q, mfb_h), H_f, mfb_h.L)
    fq = linear(q, store[f"{prefix}.fc_q.W"], store[f"{prefix}.fc_q.b"])
    f_v = mul(linear(v_f, store[f"{prefix}.fc_v.W"], store[f"{prefix}.fc_v.b"]), fq)
    f_h = mul(linear(h_f, store[f"{prefix}.fc_h.W"], store[f"{prefix}.fc_h.b"]), fq)
    f = linear(concat([f_v, f_h], axis=-1), store[f"{prefix}.fc_f.W"], store[f"{prefix}.fc_f.b"])
    return score(f, A)


# ------------------------------------------------------------- round dropout

@dataclass(frozen=True)
class RoundDropoutPlan:
    """History rows to drop at one round; indices are 1-based and row 1 (caption) is never dropped."""

    round: int
    n_history: int
    n_drop: int
    dropped: tuple[int, ...]

    def kept(self) -> list[int]:
        return [i for i in range(1, self.n_history + 1) if i not in self.dropped]


def dropout_count(n_history: int) -> int:
    """Number of history features to drop given ``n_history`` available (caption included)."""
    if n_history <= 5:
        return max(0, n_history - 2)
    return MAX_DROPPED_ROUNDS


def round_dropout(r: int, n_history: int, rng: np.random.Generator) -> RoundDropoutPlan:
    if n_history < 1:
        raise ValueError("at least the caption row must be available")
    n_drop = dropout_count(n_history)
    dropped = ()
    if n_drop:
        dropped = tuple(sorted(int(i) for i in rng.choice(np.arange(2, n_history + 1), n_drop, replace=False)))
    return RoundDropoutPlan(round=r, n_history=n_history, n_drop=n_drop, dropped=dropped)


def history_rows(r: int, keep_last: int | None = None) -> list[int]:
    """0-based rows of [caption, QA_1, ..., QA_{r-1}] visible at round ``r``.

    ``keep_last`` limits the QA rows to the most recent ones; the caption stays.
    """
    qa = list(range(1, r))
    if keep_last is not None:
        if keep_last < 0:
            raise ValueError("keep_last must be >= 0")
        qa = qa[len(qa) - keep_last:] if keep_last < len(qa) else qa
    return [0] + qa


def truncate_history(H: Tensor, keep_last_k: int) -> Tensor:
    """Keep the caption row plus the ``keep_last_k`` most recent QA rows of ``H`` (``[..., r, d]``)."""
    rows = history_rows(H.shape[-2], keep_last_k)
    if len(rows) == H.shape[-2]:
        return H
    return take(H, rows, axis=-2)
