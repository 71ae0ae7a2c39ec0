"""Image-only answer scorer: bilinear-pooling attention of the question over objects.

All functions accept either a single instance (``V: [k x d]``, ``q: [d]``) or
a batch with a leading dimension (``V: [B x k x d]``, ``q: [B x d]``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .params import ParamStore, add_linear, xavier
from .tensor import (Tensor, add, concat, expand, l2_normalize, matmul, mul, power_norm, reshape,
                     softmax, transpose)


@dataclass
class MfbParams:
    M: Tensor  # [m x d_m x D]  (D: width of the attended features)
    N: Tensor  # [m x d_m x d]  (d: question width)
    L: Tensor  # [1 x d_m]

    @property
    def factors(self) -> int:
        return self.M.shape[0]

    @property
    def out_dim(self) -> int:
        return self.M.shape[1]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> MfbParams:
        return cls(store[f"{prefix}.M"], store[f"{prefix}.N"], store[f"{prefix}.L"])


def add_mfb(store: ParamStore, prefix: str, in_dim: int, q_dim: int, d_m: int, m: int,
            rng: np.random.Generator) -> None:
    store.add(f"{prefix}.M", xavier(rng, in_dim, d_m, shape=(m, d_m, in_dim)))
    store.add(f"{prefix}.N", xavier(rng, q_dim, d_m, shape=(m, d_m, q_dim)))
    store.add(f"{prefix}.L", xavier(rng, d_m, 1, shape=(1, d_m)))


def add_image_only(store: ParamStore, prefix: str, d: int, d_m: int, m: int, rng: np.random.Generator,
                   use_caption: bool = False) -> None:
    add_mfb(store, f"{prefix}.mfb", d, d, d_m, m, rng)
    for name in ("fc_v", "fc_q", "fc_f"):
        add_linear(store, f"{prefix}.{name}", d, d, rng)
    if use_caption:
        add_linear(store, f"{prefix}.cap", 2 * d, d, rng)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    y = matmul(x, W) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, x.shape[0])), W), (W.shape[1],))
    return add(y, expand(b, y.shape))


def project_visual(v_rcnn: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Linear map of object features ``[..., k, d_v] -> [..., k, d]``."""
    if v_rcnn.shape[-1] != W.shape[0]:
        raise ShapeError(f"project_visual: features {v_rcnn.shape} vs projection {W.shape}")
    return linear(v_rcnn, W, b)


def _factor_sum(m: int, d_m: int) -> Tensor:
    s = np.zeros((m * d_m, d_m))
    for i in range(m):
        s[i * d_m:(i + 1) * d_m] = np.eye(d_m)
    return Tensor(s)


def mfb(V: Tensor, q: Tensor, params: MfbParams, normalize: bool = True) -> Tensor:
    """Factorized bilinear pooling of every row of ``V`` with ``q``.

    z = sum_i ((M_i V^T) * (N_i q 1_k^T))^T, then signed sqrt and per-row
    l2 normalisation unless ``normalize`` is False.  Returns ``[..., k, d_m]``.
    """
    m, d_m, D = params.M.shape
    dq = params.N.shape[2]
    if V.shape[-1] != D or q.shape[-1] != dq or q.shape[:-1] != V.shape[:-2]:
        raise ShapeError(f"mfb: V {V.shape}, q {q.shape} vs M {params.M.shape}, N {params.N.shape}")
    k = V.shape[-2]
    lead = V.shape[:-2]
    left = matmul(V, transpose(reshape(params.M, (m * d_m, D))))
    q_row = reshape(q, lead + (1, dq))
    right = matmul(q_row, transpose(reshape(params.N, (m * d_m, dq))))
    joint = mul(left, expand(right, lead + (k, m * d_m)))
    z = matmul(joint, _factor_sum(m, d_m))
    if not normalize:
        return z
    return l2_normalize(power_norm(z), axis=-1)


def attend(z_hat: Tensor, V: Tensor, L: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax attention over the k rows; returns (weighted sum of V rows, weights)."""
    if z_hat.shape[:-1] != V.shape[:-1] or z_hat.shape[-1] != L.shape[1]:
        raise ShapeError(f"attend: z {z_hat.shape}, V {V.shape}, L {L.shape}")
    k = V.shape[-2]
    lead = V.shape[:-2]
    logits = reshape(matmul(z_hat, transpose(L)), lead + (k,))
    alpha = softmax(logits, axis=-1)
    v = matmul(reshape(alpha, lead + (1, k)), V)
    return reshape(v, lead + (V.shape[-1],)), alpha


def score(f: Tensor, A: Tensor) -> Tensor:
    """Dot product of the fused feature with each candidate row: ``[..., C]``."""
    if A.shape[-2] == 0:
        raise ValueError("no candidate answers to score")
    if f.shape[-1] != A.shape[-1] or f.shape[:-1] != A.shape[:-2]:
        raise ShapeError(f"score: feature {f.shape} vs candidates {A.shape}")
    lead = f.shape[:-1]
    s = matmul(A, reshape(f, lead + (f.shape[-1], 1)))
    return reshape(s, A.shape[:-1])


def fuse_and_score(v: Tensor, q: Tensor, A: Tensor, store: ParamStore, prefix: str) -> Tensor:
    fv = linear(v, store[f"{prefix}.fc_v.W"], store[f"{prefix}.fc_v.b"])
    fq = linear(q, store[f"{prefix}.fc_q.W"], store[f"{prefix}.fc_q.b"])
    f = linear(mul(fv, fq), store[f"{prefix}.fc_f.W"], store[f"{prefix}.fc_f.b"])
    return score(f, A)


def image_only_forward(V: Tensor, q: Tensor, A: Tensor, store: ParamStore, prefix: str = "img",
                       caption: Tensor | None = None) -> Tensor:
    """Candidate scores from projected objects ``V``, question ``q`` and candidates ``A``.

    ``caption`` is only consulted when the head was built with a caption
    projection; the question is then replaced by a projection of [q; caption].
    """
    if f"{prefix}.cap.W" in store:
        if caption is None:
            raise ValueError("this head was built with use_caption and needs the caption encoding")
        q = linear(concat([q, caption], axis=-1), store[f"{prefix}.cap.W"], store[f"{prefix}.cap.b"])
    params = MfbParams.from_store(store, f"{prefix}.mfb")
    z_hat = mfb(V, q, params)
    v, _ = attend(z_hat, V, params.L)
    return fuse_and_score(v, q, A, store, prefix)
