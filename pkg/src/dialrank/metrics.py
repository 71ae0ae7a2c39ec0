"""Ranking metrics over candidate-answer scores.

Ties are broken by candidate index everywhere (lower index ranks first), the
same rule :func:`dialrank.fusion.rank_candidates` uses.

NDCG follows the Visual Dialog challenge convention: with K the number of
candidates of non-zero relevance, DCG sums rel/log2(i+1) over the model's top
K, and the ideal DCG does the same over relevances sorted descending.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass
class RankedInstance:
    scores: np.ndarray
    gt_index: int
    relevance: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not 0 <= self.gt_index < self.scores.size:
            raise IndexError(f"gt_index {self.gt_index} outside 0..{self.scores.size - 1}")
        if self.relevance is not None:
            rel = np.asarray(self.relevance, dtype=np.float64)
            if rel.shape != self.scores.shape:
                raise ValueError("relevance and scores differ in length")
            if np.any(rel < 0) or np.any(rel > 1) or not np.any(rel > 0):
                raise ValueError("relevance must lie in [0, 1] with at least one positive entry")
            self.relevance = rel


@dataclass
class MetricReport:
    ndcg: float | None
    mrr: float
    r1: float
    r5: float
    r10: float
    mean_rank: float
    n_instances: int

    COLUMNS = ("NDCG", "MRR", "R@1", "R@5", "R@10", "Mean")

    def row(self) -> list[float | None]:
        return [self.ndcg, self.mrr, self.r1, self.r5, self.r10, self.mean_rank]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self, name: str = "model") -> str:
        return format_table([(name, self)])


def rank_of(scores, gt_index: int) -> int:
    """1 + #(strictly higher scores) + #(equal scores at lower index)."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= gt_index < s.size:
        raise IndexError(f"gt_index {gt_index} outside 0..{s.size - 1}")
    g = s[gt_index]
    return 1 + int(np.sum(s > g)) + int(np.sum(s[:gt_index] == g))


def _ranks(instances: Sequence[RankedInstance]) -> np.ndarray:
    if not instances:
        raise ValueError("metrics need at least one instance")
    return np.array([rank_of(x.scores, x.gt_index) for x in instances], dtype=np.float64)


def mrr(instances: Sequence[RankedInstance]) -> float:
    return float(np.mean(1.0 / _ranks(instances)))


def recall_at(instances: Sequence[RankedInstance], k: int) -> float:
    return float(np.mean(_ranks(instances) <= k))


def mean_rank(instances: Sequence[RankedInstance]) -> float:
    return float(np.mean(_ranks(instances)))


def ndcg(instance: RankedInstance) -> float:
    rel = instance.relevance
    if rel is None:
        raise ValueError("NDCG needs dense relevance")
    k = int(np.sum(rel > 0))
    if k == 0:
        raise ValueError("NDCG undefined for all-zero relevance")
    order = np.argsort(-instance.scores, kind="stable")
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.sum(rel[order[:k]] * discount))
    ideal = float(np.sum(np.sort(rel)[::-1][:k] * discount))
    return dcg / ideal


def evaluate(instances: Sequence[RankedInstance]) -> MetricReport:
    ranks = _ranks(instances)
    dense = [ndcg(x) for x in instances if x.relevance is not None]
    return MetricReport(
        ndcg=float(np.mean(dense)) if dense else None,
        mrr=float(np.mean(1.0 / ranks)),
        r1=float(np.mean(ranks <= 1)),
        r5=float(np.mean(ranks <= 5)),
        r10=float(np.mean(ranks <= 10)),
        mean_rank=float(np.mean(ranks)),
        n_instances=len(instances),
    )


@dataclass
class Complementarity:
    r1_intersection: float
    r1_union: float
    ndcg_intersection: float | None
    ndcg_union: float | None


def complementarity(a: Sequence[RankedInstance], b: Sequence[RankedInstance]) -> Complementarity:
    """R@1 as set intersection / union of correctly answered instances; NDCG via per-instance min / max.

    The NDCG pair is only a heuristic bound, not a set metric.
    """
    if len(a) != len(b) or not a:
        raise ValueError(f"instance sets misaligned: {len(a)} vs {len(b)}")
    for i, (x, y) in enumerate(zip(a, b)):
        if x.gt_index != y.gt_index or x.scores.shape != y.scores.shape:
            raise ValueError(f"instance {i} differs between the two models")
    hit_a = np.array([rank_of(x.scores, x.gt_index) == 1 for x in a])
    hit_b = np.array([rank_of(y.scores, y.gt_index) == 1 for y in b])
    ndcg_inter = ndcg_union = None
    if all(x.relevance is not None for x in a):
        na = np.array([ndcg(x) for x in a])
        nb = np.array([ndcg(RankedInstance(y.scores, y.gt_index, x.relevance)) for x, y in zip(a, b)])
        ndcg_inter = float(np.mean(np.minimum(na, nb)))
        ndcg_union = float(np.mean(np.maximum(na, nb)))
    return Complementarity(
        r1_intersection=float(np.mean(hit_a & hit_b)),
        r1_union=float(np.mean(hit_a | hit_b)),
        ndcg_intersection=ndcg_inter,
        ndcg_union=ndcg_union,
    )


# ------------------------------------------------------------- annotations

@dataclass
class Annotation:
    example_id: str
    round: int
    gt_index: int
    relevance: np.ndarray | None = None


def write_annotations(path: str | Path, anns: Sequence[Annotation]) -> None:
    """One line per instance: ``<example_id> <round> <gt_index> [<relevance floats>]``."""
    lines = []
    for a in anns:
        parts = [a.example_id, str(a.round), str(a.gt_index)]
        if a.relevance is not None:
            parts += [repr(float(v)) for v in a.relevance]
        lines.append(" ".join(parts))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_annotations(path: str | Path) -> list[Annotation]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3:
            raise DataError(f"{path}:{lineno}: expected '<example_id> <round> <gt_index> [relevance...]'")
        try:
            rel = np.array([float(v) for v in parts[3:]]) if len(parts) > 3 else None
            out.append(Annotation(parts[0], int(parts[1]), int(parts[2]), rel))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def instances_from(values: np.ndarray, ids: Sequence[tuple[str, int]],
                   anns: Sequence[Annotation]) -> list[RankedInstance]:
    """Join logit rows with annotations by (example_id, round)."""
    by_key = {(a.example_id, a.round): a for a in anns}
    out = []
    for row, key in zip(values, ids):
        a = by_key.get(key)
        if a is None:
            raise DataError(f"no annotation for instance {key[0]} round {key[1]}")
        if not 0 <= a.gt_index < row.size:
            raise DataError(f"instance {key}: gt_index {a.gt_index} outside {row.size} candidates")
        if a.relevance is not None and a.relevance.size != row.size:
            raise DataError(f"instance {key}: {a.relevance.size} relevance values for {row.size} candidates")
        try:
            out.append(RankedInstance(row, a.gt_index, a.relevance))
        except ValueError as exc:
            raise DataError(f"instance {key}: {exc}") from None
    if len(by_key) != len(out):
        raise DataError(f"{len(by_key)} annotations but {len(out)} logit rows")
    return out


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Fixed-width table; metrics in percent, mean rank raw."""
    width = max(8, max(len(name) for name, _ in rows))
    head = f"{'Model':<{width}}" + "".join(f"{c:>8}" for c in MetricReport.COLUMNS)
    lines = [head]
    for name, rep in rows:
        cells = []
        for col, v in zip(MetricReport.COLUMNS, rep.row()):
            if v is None:
                cells.append(f"{'-':>8}")
            elif col == "Mean":
                cells.append(f"{v:>8.2f}")
            else:
                cells.append(f"{100 * v:>8.2f}")
        lines.append(f"{name:<{width}}" + "".join(cells))
    return "\n".join(lines)
