"""Combining the two heads: consensus, instance dropout, and test-time ensembles."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, add, expand, mul

PROVENANCE = ("image_only", "joint", "fused", "ensemble")


@dataclass
class LogitMatrix:
    """Candidate scores, one row per (example, round) instance."""

    values: np.ndarray                      # [(N*R) x C]
    ids: list[tuple[str, int]]              # (example_id, round) per row
    provenance: str = "fused"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ShapeError(f"logit matrix {self.values.shape} does not match {len(self.ids)} instance ids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("logit matrix contains non-finite values")

    @property
    def n_candidates(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


def consensus(l_i, l_j):
    """Elementwise sum of the two heads' logits (tensors or :class:`LogitMatrix`)."""
    if isinstance(l_i, LogitMatrix):
        _check_aligned([l_i, l_j])
        return LogitMatrix(l_i.values + l_j.values, list(l_i.ids), provenance="fused")
    return add(l_i, l_j)


def instance_dropout_mask(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """xi_i = Bernoulli(1-p) / (1-p); entries are exactly 0 or 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"instance dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(n)
    keep = rng.random(n) >= p
    return np.where(keep, 1.0 / (1.0 - p), 0.0)


def apply_instance_mask(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Scale whole rows of ``logits`` ([n x C]) by ``mask`` ([n])."""
    n, c = logits.shape
    if mask.shape != (n,):
        raise ShapeError(f"mask {mask.shape} does not match {n} instance rows")
    return mul(logits, expand(Tensor(mask.reshape(n, 1)), (n, c)))


def instance_dropout(l_j: Tensor, p: float, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    if p == 0.0:
        return l_j, np.ones(l_j.shape[0])
    mask = instance_dropout_mask(l_j.shape[0], p, rng)
    return apply_instance_mask(l_j, mask), mask


HeadFn = Callable[[object], Sequence[Tensor]]


def consensus_dropout_forward(batch, head_i: HeadFn, head_j: HeadFn, p: float, training: bool,
                              rng: np.random.Generator | None = None) -> list[Tensor]:
    """Fused per-round logits ``L_I + xi * L_J``.

    ``head_i(batch)`` / ``head_j(batch)`` return one ``[B x C]`` tensor per
    round (rows = examples).  In training one mask entry is drawn per
    (example, round) instance, laid out example-major as ``b * R + r``; in
    evaluation the joint logits pass unscaled.
    """
    li = head_i(batch)
    lj = head_j(batch)
    if len(li) != len(lj):
        raise ShapeError("heads disagree on the number of rounds")
    if not training or p == 0.0:
        return [consensus(a, b) for a, b in zip(li, lj)]
    n_rounds = len(li)
    n_ex = li[0].shape[0]
    mask = instance_dropout_mask(n_ex * n_rounds, p, rng).reshape(n_ex, n_rounds)
    return [consensus(a, apply_instance_mask(b, mask[:, r])) for r, (a, b) in enumerate(zip(li, lj))]


# ------------------------------------------------------------------ ensemble

def _check_aligned(mats: Sequence[LogitMatrix]) -> None:
    if not mats:
        raise ValueError("need at least one logit matrix")
    first = mats[0]
    for m in mats[1:]:
        if m.values.shape != first.values.shape:
            raise ShapeError(f"logit shapes differ: {first.values.shape} vs {m.values.shape}")
        if m.ids != first.ids:
            bad = next(i for i, (a, b) in enumerate(zip(first.ids, m.ids)) if a != b)
            raise DataError(f"instance ids differ at row {bad}: {first.ids[bad]} vs {m.ids[bad]}")


def rank_candidates(values: np.ndarray) -> np.ndarray:
    """Candidate indices per row by descending score; ties go to the lower index."""
    return np.argsort(-values, axis=-1, kind="stable")


def ensemble(mats: Sequence[LogitMatrix]) -> tuple[LogitMatrix, np.ndarray]:
    """Sum raw logits left to right; returns the summed matrix and per-row rankings."""
    _check_aligned(mats)
    total = mats[0].values.copy()
    for m in mats[1:]:
        total = total + m.values
    merged = LogitMatrix(total, list(mats[0].ids), provenance="ensemble")
    return merged, rank_candidates(total)


# ----------------------------------------------------------------- file I/O

def write_logits(path: str | Path, mat: LogitMatrix) -> None:
    """``C=<int> INSTANCES=<int>`` header, then ``<example_id> <round> <C floats>`` lines."""
    lines = [f"C={mat.n_candidates} INSTANCES={len(mat)}"]
    for (ex, r), row in zip(mat.ids, mat.values):
        if not ex or any(ch.isspace() for ch in ex):
            raise DataError(f"example id {ex!r} cannot be written: ids must be non-empty without whitespace")
        lines.append(" ".join([ex, str(r)] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_logits(path: str | Path, provenance: str = "fused") -> LogitMatrix:
    text = Path(path).read_text().split("\n")
    if text and text[-1] == "":
        text.pop()
    if not text:
        raise DataError(f"{path}:1: empty logit file")
    try:
        c_part, n_part = text[0].split()
        if not (c_part.startswith("C=") and n_part.startswith("INSTANCES=")):
            raise ValueError
        n_cand, n_inst = int(c_part[2:]), int(n_part[10:])
    except ValueError:
        raise DataError(f"{path}:1: bad header {text[0]!r}, expected 'C=<int> INSTANCES=<int>'") from None
    if len(text) - 1 != n_inst:
        raise DataError(f"{path}:{len(text) + 1}: header promises {n_inst} instances, found {len(text) - 1}")
    ids, rows = [], []
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split()
        if len(parts) != n_cand + 2:
            raise DataError(f"{path}:{lineno}: expected {n_cand + 2} fields, got {len(parts)}")
        try:
            ids.append((parts[0], int(parts[1])))
            rows.append([float(v) for v in parts[2:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    values = np.array(rows, dtype=np.float64).reshape(n_inst, n_cand)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite logits")
    return LogitMatrix(values, ids, provenance=provenance)


def stack_rounds(per_round: Sequence[np.ndarray]) -> np.ndarray:
    """Per-round ``[B x C]`` arrays -> example-major ``[(B*R) x C]``."""
    arr = np.stack(per_round, axis=1)
    return arr.reshape(-1, arr.shape[-1])

