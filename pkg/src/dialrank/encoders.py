"""Token vocabulary and LSTM encoders for questions, history rounds and answers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .params import ParamStore
from .tensor import (Tensor, add, concat, expand, matmul, mul, sigmoid, slice_axis, take, tanh,
                     transpose)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

ENCODERS = ("lstm_q", "lstm_h", "lstm_a")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Dense token ids; 0 and 1 are reserved for padding and unknown tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> Vocabulary:
        """Vocabulary over every token seen, in sorted order (deterministic ids)."""
        seen = set()
        for toks in token_lists:
            seen.update(toks)
        seen -= {PAD_TOKEN, UNK_TOKEN}
        return cls(sorted(seen))

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.itos))

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        lines = Path(path).read_text().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if lines[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError(f"{path}:1: vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}")
        vocab = cls()
        for lineno, tok in enumerate(lines[2:], start=3):
            if not tok or tok in vocab.stoi or any(ch.isspace() for ch in tok):
                raise DataError(f"{path}:{lineno}: invalid or duplicate token {tok!r}")
            vocab.add(tok)
        return vocab


# ----------------------------------------------------------------- recurrence

@dataclass
class RecurrentCellParams:
    """Gate blocks are stacked in the order input, forget, cell, output."""

    W_ih: Tensor  # [4h x e]
    W_hh: Tensor  # [4h x h]
    b: Tensor     # [4h]

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_ih.shape[1]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> RecurrentCellParams:
        return cls(store[f"{prefix}.W_ih"], store[f"{prefix}.W_hh"], store[f"{prefix}.b"])


def add_lstm(store: ParamStore, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> None:
    a = 1.0 / np.sqrt(hidden)
    store.add(f"{prefix}.W_ih", rng.uniform(-a, a, size=(4 * hidden, n_in)))
    store.add(f"{prefix}.W_hh", rng.uniform(-a, a, size=(4 * hidden, hidden)))
    store.add(f"{prefix}.b", np.zeros(4 * hidden))


def add_encoders(store: ParamStore, vocab_size: int, embed_dim: int, hidden: int,
                 rng: np.random.Generator) -> None:
    """One embedding table shared by three independent LSTMs."""
    store.add("enc.embed", rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(vocab_size, embed_dim)))
    for name in ENCODERS:
        add_lstm(store, f"enc.{name}", embed_dim, hidden, rng)


def _gates(pre: Tensor, c_prev: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    i = sigmoid(slice_axis(pre, 0, hidden))
    f = sigmoid(slice_axis(pre, hidden, 2 * hidden))
    g = tanh(slice_axis(pre, 2 * hidden, 3 * hidden))
    o = sigmoid(slice_axis(pre, 3 * hidden, 4 * hidden))
    c = add(mul(f, c_prev), mul(i, g))
    return mul(o, tanh(c)), c


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, cell: RecurrentCellParams) -> tuple[Tensor, Tensor]:
    """One gated update.  Accepts single vectors or row-stacked batches."""
    single = x.ndim == 1
    if single:
        x, h_prev, c_prev = (t.reshape(1, t.shape[0]) for t in (x, h_prev, c_prev))
    hidden = cell.hidden
    if x.shape[-1] != cell.input_size or h_prev.shape[-1] != hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
                         f"vs cell input {cell.input_size}, hidden {hidden}")
    pre = add(add(matmul(x, transpose(cell.W_ih)), matmul(h_prev, transpose(cell.W_hh))),
              expand(cell.b, (x.shape[0], 4 * hidden)))
    h, c = _gates(pre, c_prev, hidden)
    if single:
        return h.reshape(hidden), c.reshape(hidden)
    return h, c


def strip_padding(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    while ids and ids[-1] == PAD:
        ids.pop()
    return ids


def encode_sequence(tokens: Sequence[int], cell: RecurrentCellParams, embeddings: Tensor) -> Tensor:
    """Last hidden state after the final non-PAD token (one step at a time)."""
    ids = strip_padding(tokens)
    if not ids:
        raise ValueError("cannot encode an empty sequence")
    h = Tensor(np.zeros(cell.hidden))
    c = Tensor(np.zeros(cell.hidden))
    for tok in ids:
        x = take(embeddings, [tok]).reshape(embeddings.shape[1])
        h, c = lstm_step(x, h, c, cell)
    return h


def encode_batch(seqs: Sequence[Sequence[int]], cell: RecurrentCellParams, embeddings: Tensor) -> Tensor:
    """Encode many sequences at once; row i is the last hidden state of ``seqs[i]``.

    Sequences are sorted by length so the active set at every step is a
    prefix of the rows; finished sequences leave the batch at their last
    real token, which makes the result identical to :func:`encode_sequence`.
    """
    seqs = [strip_padding(s) for s in seqs]
    if not seqs:
        raise ValueError("no sequences to encode")
    if any(not s for s in seqs):
        raise ValueError("cannot encode an empty sequence")
    hidden = cell.hidden
    lengths = np.array([len(s) for s in seqs])
    order = np.argsort(-lengths, kind="stable")
    ordered = [seqs[i] for i in order]
    max_len = int(lengths.max())
    active = [int((lengths > t).sum()) for t in range(max_len)]

    flat_ids = [s[t] for t in range(max_len) for s in ordered[:active[t]]]
    offsets = np.concatenate([[0], np.cumsum(active)])
    proj = matmul(take(embeddings, flat_ids), transpose(cell.W_ih))
    proj = add(proj, expand(cell.b, proj.shape))
    w_hh_t = transpose(cell.W_hh)

    h = Tensor(np.zeros((active[0], hidden)))
    c = Tensor(np.zeros((active[0], hidden)))
    finished: list[Tensor] = []
    for t in range(max_len):
        n = active[t]
        if h.shape[0] > n:
            finished.append(slice_axis(h, n, h.shape[0], axis=0))
            h = slice_axis(h, 0, n, axis=0)
            c = slice_axis(c, 0, n, axis=0)
        pre = add(slice_axis(proj, offsets[t], offsets[t + 1], axis=0), matmul(h, w_hh_t))
        h, c = _gates(pre, c, hidden)
    finished.append(h)
    stacked = finished[0] if len(finished) == 1 else concat(finished[::-1], axis=0)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return take(stacked, inverse, axis=0)


def build_history_round(question: Sequence, answer: Sequence) -> list:
    """Question tokens followed by the ground-truth answer tokens."""
    if not question or not answer:
        raise ValueError("history round needs a non-empty question and answer")
    return list(question) + list(answer)


# --------------------------------------------------------------------- dialog

@dataclass
class EncodedDialog:
    q: Tensor   # [d]
    H: Tensor   # [r x d]; row 0 is the caption
    A: Tensor   # [C x d]
    round: int


def encode_dialog(example, r: int, store: ParamStore, vocab: Vocabulary) -> EncodedDialog:
    """Encode question, history (caption + previous QA pairs) and candidates at round ``r`` (1-based)."""
    if not 1 <= r <= len(example.rounds):
        raise IndexError(f"round {r} out of range 1..{len(example.rounds)}")
    embed = store["enc.embed"]
    cell = {name: RecurrentCellParams.from_store(store, f"enc.{name}") for name in ENCODERS}
    rnd = example.rounds[r - 1]
    history = [vocab.encode(example.caption)]
    history += [vocab.encode(build_history_round(p.question, p.answer)) for p in example.rounds[:r - 1]]
    q = encode_batch([vocab.encode(rnd.question)], cell["lstm_q"], embed)
    H = encode_batch(history, cell["lstm_h"], embed)
    A = encode_batch([vocab.encode(a) for a in rnd.candidates], cell["lstm_a"], embed)
    return EncodedDialog(q=q.reshape(q.shape[1]), H=H, A=A, round=r)
