"""Deterministic synthetic visual-dialog data and its text file format.

Each image holds ``objects`` items with distinct categories and random
colours; object features are drawn from Gaussian clusters (category clusters
in the first half of the feature vector, colour clusters in the second).
Every dialog contains one "is there a X ?" round whose answer names X's
colour.  Questions are either

* image questions: "what color is the X ?" / "is there a X ?", answerable
  from the image alone, or
* history questions: "what color is it ?", where "it" is the object
  introduced earlier in the dialog; the answer is the colour stated in that
  earlier answer, so it cannot be recovered from the image alone.

The share of history questions per split is set exactly by
``history_fraction`` (rounded to whole questions).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .metrics import Annotation, write_annotations

CATEGORIES = ("dog", "cat", "car", "tree", "ball", "cup", "bird", "chair", "lamp", "book", "boat", "kite")
COLORS = ("red", "blue", "green", "white", "black", "yellow", "brown", "pink")
GENERIC_ANSWERS = ("yes", "no", "i can not tell", "not sure", "maybe")

# (template, relevance) families; first entry is the ground truth form
COLOR_FORMS = (("{c}", 1.0), ("it is {c}", 0.8), ("{c} i think", 0.5))
INTRO_FORMS = (("yes , a {c} one", 1.0), ("yes it is {c}", 0.8), ("yes", 0.5))

FORMAT_HEADER = "DIALRANK-DIALOGS 1"


@dataclass
class DatasetConfig:
    n_examples: int = 350
    rounds: int = 5
    candidates: int = 20
    objects: int = 6
    d_v: int = 24
    n_categories: int = 10
    n_colors: int = 6
    history_fraction: float = 0.19
    noise: float = 0.25
    seed: int = 0
    split_ratios: dict = field(default_factory=lambda: {"train": 6 / 7, "val": 1 / 7})

    def validate(self) -> None:
        for name in ("n_examples", "rounds", "candidates", "objects", "d_v", "n_categories", "n_colors"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.objects > self.n_categories or self.n_categories > len(CATEGORIES):
            raise ConfigError(f"need objects <= n_categories <= {len(CATEGORIES)}")
        if not 2 <= self.n_colors <= len(COLORS):
            raise ConfigError(f"n_colors must be in 2..{len(COLORS)}")
        if self.d_v < 2:
            raise ConfigError("d_v must be >= 2")
        if not self.n_colors + 2 <= self.candidates <= answer_pool_size(self.n_colors):
            raise ConfigError(f"candidates must be in {self.n_colors + 2}..{answer_pool_size(self.n_colors)}")
        if not 0.0 <= self.history_fraction <= (self.rounds - 1) / self.rounds:
            raise ConfigError("history_fraction must lie in [0, (rounds-1)/rounds]")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        ratios = list(self.split_ratios.values())
        if not ratios or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be positive and sum to 1")

    def split_sizes(self) -> dict[str, int]:
        names = list(self.split_ratios)
        sizes = {n: int(round(self.n_examples * self.split_ratios[n])) for n in names[:-1]}
        sizes[names[-1]] = self.n_examples - sum(sizes.values())
        if any(v <= 0 for v in sizes.values()):
            raise ConfigError(f"split sizes {sizes} leave an empty split")
        return sizes


@dataclass
class Round:
    question: list[str]
    answer: list[str]
    candidates: list[list[str]]
    gt_index: int
    relevance: list[float]
    kind: str = "image"  # "image" or "history"


@dataclass
class DialogExample:
    example_id: str
    image_features: np.ndarray        # [k x d_v]
    objects: list[tuple[str, str]]    # (category, colour) per row of image_features
    caption: list[str]
    rounds: list[Round]


@dataclass
class Dataset:
    config: DatasetConfig
    splits: dict[str, list[DialogExample]]


def answer_pool(n_colors: int) -> list[str]:
    pool = []
    for c in COLORS[:n_colors]:
        pool += [t.format(c=c) for t, _ in COLOR_FORMS]
        pool += [t.format(c=c) for t, _ in INTRO_FORMS[:2]]
    pool += list(GENERIC_ANSWERS)
    return pool


def answer_pool_size(n_colors: int) -> int:
    return 5 * n_colors + len(GENERIC_ANSWERS)


class _World:
    """Feature cluster centres shared by all splits of one dataset."""

    def __init__(self, cfg: DatasetConfig, rng: np.random.Generator):
        half = cfg.d_v // 2
        self.cfg = cfg
        self.categories = CATEGORIES[:cfg.n_categories]
        self.colors = COLORS[:cfg.n_colors]
        self.cat_centres = rng.normal(size=(cfg.n_categories, half))
        self.color_centres = rng.normal(size=(cfg.n_colors, cfg.d_v - half))
        self.pool = answer_pool(cfg.n_colors)

    def features(self, objects, rng) -> np.ndarray:
        rows = []
        for cat, col in objects:
            centre = np.concatenate([self.cat_centres[self.categories.index(cat)],
                                     self.color_centres[self.colors.index(col)]])
            rows.append(centre + self.cfg.noise * rng.normal(size=self.cfg.d_v))
        return np.array(rows)


def _candidates(world: _World, forms, color: str, n: int, rng) -> tuple[list[list[str]], int, list[float]]:
    relevant = {t.format(c=color): rel for t, rel in forms}
    gt = forms[0][0].format(c=color)
    # the ground-truth form in every other colour is always present, so a
    # guess among the image's colours is never helped by the candidate set
    hard = [forms[0][0].format(c=c) for c in world.colors if c != color]
    others = [a for a in world.pool if a not in relevant and a not in hard]
    fill = n - len(relevant) - len(hard)
    picked = list(relevant) + hard + [others[i] for i in rng.choice(len(others), fill, replace=False)]
    order = rng.permutation(n)
    answers = [picked[i] for i in order]
    rel = [relevant.get(a, 0.0) for a in answers]
    return [a.split() for a in answers], answers.index(gt), rel


def _allocate(n_dialogs: int, total: int, capacity: int, rng) -> np.ndarray:
    counts = np.zeros(n_dialogs, dtype=int)
    for _ in range(total):
        open_ = np.flatnonzero(counts < capacity)
        counts[open_[rng.integers(len(open_))]] += 1
    return counts


def _dialog(world: _World, example_id: str, n_history: int, rng) -> DialogExample:
    cfg = world.cfg
    cats = [world.categories[i] for i in rng.choice(cfg.n_categories, cfg.objects, replace=False)]
    while True:
        cols = [world.colors[i] for i in rng.integers(cfg.n_colors, size=cfg.objects)]
        if len(set(cols)) >= 2:
            break
    objects = list(zip(cats, cols))
    feats = world.features(objects, rng)
    mentioned = rng.choice(cfg.objects, min(2, cfg.objects), replace=False)
    caption = "a photo of " + " and ".join(f"a {cats[i]}" for i in mentioned)

    R = cfg.rounds
    intro = int(rng.integers(1, R - n_history + 1))
    dependent = set(int(x) for x in rng.choice(np.arange(intro + 1, R + 1), n_history, replace=False))
    focus = int(rng.integers(cfg.objects))
    rounds = []
    for r in range(1, R + 1):
        if r == intro:
            cat, col = objects[focus]
            q, forms, kind = f"is there a {cat} ?", INTRO_FORMS, "image"
        elif r in dependent:
            col = objects[focus][1]
            q, forms, kind = "what color is it ?", COLOR_FORMS, "history"
        else:
            cat, col = objects[int(rng.integers(cfg.objects))]
            q, forms, kind = f"what color is the {cat} ?", COLOR_FORMS, "image"
        cands, gt, rel = _candidates(world, forms, col, cfg.candidates, rng)
        rounds.append(Round(q.split(), list(cands[gt]), cands, gt, rel, kind))
    return DialogExample(example_id, feats, objects, caption.split(), rounds)


def generate(cfg: DatasetConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)
    splits = {}
    for name, size in cfg.split_sizes().items():
        quota = int(round(cfg.history_fraction * size * cfg.rounds))
        counts = _allocate(size, quota, cfg.rounds - 1, rng)
        splits[name] = [_dialog(world, f"{name}-{i:05d}", int(counts[i]), rng) for i in range(size)]
    return Dataset(cfg, splits)


def history_fraction(examples: Sequence[DialogExample]) -> float:
    kinds = [rd.kind for ex in examples for rd in ex.rounds]
    return sum(k == "history" for k in kinds) / len(kinds)


# -------------------------------------------------------------- oracles

def _color_of(example: DialogExample, category: str) -> str | None:
    for cat, col in example.objects:
        if cat == category:
            return col
    return None


def image_oracle_answer(example: DialogExample, r: int) -> str:
    """Best answer from the image attributes and the current question only.

    For "it" questions the referent is unknown; the guess is the first
    object's colour.
    """
    q = example.rounds[r - 1].question
    if q[:3] == ["is", "there", "a"]:
        return INTRO_FORMS[0][0].format(c=_color_of(example, q[3]))
    if q[:4] == ["what", "color", "is", "the"]:
        return _color_of(example, q[4])
    return example.objects[0][1]


def full_oracle_answer(example: DialogExample, r: int) -> str:
    """Answer using image attributes plus the dialog history up to round ``r``."""
    q = example.rounds[r - 1].question
    if q == ["what", "color", "is", "it", "?"]:
        for prev in example.rounds[:r - 1]:
            if prev.question[:3] == ["is", "there", "a"]:
                return prev.answer[3]
        raise DataError(f"{example.example_id} round {r}: no referent in history")
    return image_oracle_answer(example, r)


# -------------------------------------------------------------- file format

def _floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dumps_examples(examples: Sequence[DialogExample]) -> str:
    lines = [FORMAT_HEADER, f"COUNT {len(examples)}"]
    for ex in examples:
        k, d_v = ex.image_features.shape
        lines.append(f"EXAMPLE {ex.example_id}")
        lines.append("OBJECTS " + " ".join(f"{c}:{col}" for c, col in ex.objects))
        lines.append(f"IMAGE {k} {d_v}")
        lines += [_floats(row) for row in ex.image_features]
        lines.append("CAPTION " + " ".join(ex.caption))
        for r, rd in enumerate(ex.rounds, start=1):
            lines.append(f"ROUND {r} {len(rd.candidates)} {rd.gt_index} {rd.kind}")
            lines.append("Q " + " ".join(rd.question))
            lines.append("A " + " ".join(rd.answer))
            lines += ["CAND " + " ".join(c) for c in rd.candidates]
            lines.append("REL " + _floats(rd.relevance))
        lines.append("END")
    return "\n".join(lines) + "\n"


def save_examples(path: str | Path, examples: Sequence[DialogExample]) -> None:
    Path(path).write_text(dumps_examples(examples))


class _Lines:
    def __init__(self, text: str, path: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.path = path

    def error(self, msg: str, lineno: int | None = None) -> DataError:
        return DataError(f"{self.path}:{lineno or self.pos}: {msg}")

    def next(self, tag: str) -> list[str]:
        if self.pos >= len(self.lines):
            self.pos += 1
            raise self.error(f"unexpected end of file, expected {tag}")
        line = self.lines[self.pos]
        self.pos += 1
        parts = line.split(" ")
        if tag and parts[0] != tag:
            raise self.error(f"expected {tag}, found {line[:40]!r}")
        return parts[1:] if tag else parts

    def floats(self, parts: list[str], n: int) -> list[float]:
        if len(parts) != n:
            raise self.error(f"expected {n} numbers, found {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise self.error(str(exc)) from None
        if not all(np.isfinite(vals)):
            raise self.error("non-finite value")
        return vals

    def ints(self, parts: list[str], n: int) -> list[int]:
        try:
            if len(parts) < n:
                raise ValueError(f"expected {n} integers")
            return [int(p) for p in parts[:n]]
        except ValueError as exc:
            raise self.error(str(exc)) from None


def loads_examples(text: str, path: str = "<string>") -> list[DialogExample]:
    src = _Lines(text, path)
    header = src.next("")
    if " ".join(header) != FORMAT_HEADER:
        raise src.error(f"expected header {FORMAT_HEADER!r}")
    (count,) = src.ints(src.next("COUNT"), 1)
    out = []
    for _ in range(count):
        ex_id = src.next("EXAMPLE")
        if len(ex_id) != 1:
            raise src.error("example id must be one token")
        objects = []
        for item in src.next("OBJECTS"):
            cat, sep, col = item.partition(":")
            if not sep:
                raise src.error(f"bad object {item!r}")
            objects.append((cat, col))
        k, d_v = src.ints(src.next("IMAGE"), 2)
        if k != len(objects):
            raise src.error(f"IMAGE has {k} rows but {len(objects)} objects")
        feats = np.array([src.floats(src.next(""), d_v) for _ in range(k)]).reshape(k, d_v)
        caption = src.next("CAPTION")
        rounds = []
        while True:
            parts = src.next("")
            if parts[0] == "END":
                break
            if parts[0] != "ROUND":
                raise src.error(f"expected ROUND or END, found {parts[0]!r}")
            head_line = src.pos
            r, n_cand, gt = src.ints(parts[1:], 3)
            kind = parts[4] if len(parts) > 4 else ""
            if r != len(rounds) + 1:
                raise src.error(f"round {r} out of order", head_line)
            if kind not in ("image", "history"):
                raise src.error(f"unknown question kind {kind!r}", head_line)
            if not 0 <= gt < n_cand:
                raise src.error(f"gt_index {gt} outside 0..{n_cand - 1}", head_line)
            q = src.next("Q")
            a = src.next("A")
            cands = [src.next("CAND") for _ in range(n_cand)]
            rel = src.floats(src.next("REL"), n_cand)
            if any(v < 0 or v > 1 for v in rel):
                raise src.error("relevance outside [0, 1]")
            if rel[gt] != 1.0:
                raise src.error("ground-truth relevance must be 1.0")
            if cands[gt] != a:
                raise src.error("answer does not match the ground-truth candidate", head_line)
            rounds.append(Round(q, a, cands, gt, rel, kind))
        if not rounds:
            raise src.error(f"example {ex_id[0]} has no rounds")
        out.append(DialogExample(ex_id[0], feats, objects, caption, rounds))
    if src.pos != len(src.lines):
        raise src.error("trailing content after the last example", src.pos + 1)
    return out


def load_examples(path: str | Path) -> list[DialogExample]:
    return loads_examples(Path(path).read_text(), str(path))


def annotations(examples: Sequence[DialogExample]) -> list[Annotation]:
    return [Annotation(ex.example_id, r, rd.gt_index, np.array(rd.relevance))
            for ex in examples for r, rd in enumerate(ex.rounds, start=1)]


def save(dataset: Dataset, directory: str | Path) -> None:
    """Write ``<split>.dialogs``, ``<split>.ann`` and ``dataset.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "dataset.json").write_text(json.dumps(asdict(dataset.config), indent=2, sort_keys=True) + "\n")
    for name, examples in dataset.splits.items():
        save_examples(d / f"{name}.dialogs", examples)
        write_annotations(d / f"{name}.ann", annotations(examples))


def load(directory: str | Path) -> Dataset:
    d = Path(directory)
    try:
        raw = json.loads((d / "dataset.json").read_text())
        cfg = DatasetConfig(**raw)
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"{d / 'dataset.json'}: {exc}") from None
    splits = {name: load_examples(d / f"{name}.dialogs") for name in cfg.split_ratios}
    return Dataset(cfg, splits)


# A note on the real corpus: VisDial v1.0 dialogs map onto this format as
# image_features <- detector object features, caption <- "caption",
# rounds[t].question/answer <- "questions"/"answers" indexed by the dialog,
# candidates <- "answer_options", gt_index <- "gt_index", relevance <- the
# dense annotation file.  Reading that corpus is not implemented.
