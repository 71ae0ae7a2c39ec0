"""Trainable answer rankers built from the shared encoders and one or both heads.

``image_only`` and ``joint`` score candidates with a single head; ``cdf``
(consensus dropout fusion) runs both heads over the same encoders and sums
their logits, dropping whole joint-head rows during training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .encoders import ENCODERS, RecurrentCellParams, Vocabulary, add_encoders, build_history_round, encode_batch
from .errors import ConfigError, ShapeError
from .fusion import LogitMatrix, consensus_dropout_forward
from .image_only import add_image_only, image_only_forward, project_visual
from .joint import add_joint, history_rows, joint_forward, round_dropout
from .params import ParamStore, add_linear
from .tensor import Tensor, concat, no_grad, reshape, take

MODEL_KINDS = ("image_only", "joint", "cdf")


@dataclass
class ModelConfig:
    kind: str = "joint"
    embed_dim: int = 16
    hidden: int = 32           # d: width of every encoded feature
    mfb_dim: int | None = None  # d_m; None means 2 * hidden
    factors: int = 2           # m
    round_dropout: bool = True
    history_k: int | None = None   # keep only the k most recent QA rounds (caption always kept)
    instance_dropout: float = 0.25  # p, consensus dropout fusion only
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {', '.join(MODEL_KINDS)}")
        for name in ("embed_dim", "hidden", "factors"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mfb_dim is not None and self.mfb_dim <= 0:
            raise ConfigError("mfb_dim must be positive")
        if self.history_k is not None and self.history_k < 0:
            raise ConfigError("history_k must be >= 0")
        if not 0.0 <= self.instance_dropout < 1.0:
            raise ConfigError("instance_dropout must be in [0, 1)")

    @property
    def fused_dim(self) -> int:
        return 2 * self.hidden if self.mfb_dim is None else self.mfb_dim

    @property
    def heads(self) -> tuple[str, ...]:
        return ("image_only", "joint") if self.kind == "cdf" else (self.kind,)


@dataclass
class EncodedBatch:
    example_ids: list[str]
    n_rounds: int
    V: Tensor        # [B x k x d]
    Q: Tensor        # [(B*R) x d], example-major
    A: Tensor        # [(B*R) x C x d]
    H: Tensor | None  # [(B*R) x d]: row b*R + 0 is the caption, b*R + i the i-th QA pair


class DialogModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, d_v: int):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.d_v = d_v
        rng = np.random.default_rng(config.seed)
        c = config
        self.store = ParamStore()
        add_encoders(self.store, len(vocab), c.embed_dim, c.hidden, rng)
        add_linear(self.store, "vis", d_v, c.hidden, rng)
        if "image_only" in c.heads:
            add_image_only(self.store, "img", c.hidden, c.fused_dim, c.factors, rng)
        if "joint" in c.heads:
            add_joint(self.store, "joint", c.hidden, c.fused_dim, c.factors, rng)

    # ------------------------------------------------------------ encoding
    def _encode_unique(self, seqs: list[list[str]], encoder: str) -> Tensor:
        """Encode each distinct token sequence once, then gather rows."""
        index: dict[tuple, int] = {}
        rows = [index.setdefault(tuple(s), len(index)) for s in seqs]
        unique = [self.vocab.encode(list(s)) for s in index]
        cell = RecurrentCellParams.from_store(self.store, f"enc.{encoder}")
        enc = encode_batch(unique, cell, self.store["enc.embed"])
        return take(enc, rows, axis=0)

    def encode(self, examples: Sequence) -> EncodedBatch:
        if not examples:
            raise ValueError("empty batch")
        R = len(examples[0].rounds)
        C = len(examples[0].rounds[0].candidates)
        shapes = {ex.image_features.shape for ex in examples}
        if len(shapes) != 1 or any(len(ex.rounds) != R for ex in examples):
            raise ShapeError("examples in one batch must share round count and image shape")
        if any(len(rd.candidates) != C for ex in examples for rd in ex.rounds):
            raise ShapeError("examples in one batch must share the candidate count")
        d = self.config.hidden
        feats = Tensor(np.stack([ex.image_features for ex in examples]))
        V = project_visual(feats, self.store["vis.W"], self.store["vis.b"])
        Q = self._encode_unique([rd.question for ex in examples for rd in ex.rounds], "lstm_q")
        A = self._encode_unique([c for ex in examples for rd in ex.rounds for c in rd.candidates], "lstm_a")
        H = None
        if "joint" in self.config.heads:
            hist = []
            for ex in examples:
                hist.append(ex.caption)
                hist += [build_history_round(rd.question, rd.answer) for rd in ex.rounds[:-1]]
            H = self._encode_unique(hist, "lstm_h")
        return EncodedBatch([ex.example_id for ex in examples], R, V,
                            Q, reshape(A, (len(examples) * R, C, d)), H)

    # ------------------------------------------------------------- forward
    def _round_inputs(self, enc: EncodedBatch, r: int) -> tuple[Tensor, Tensor]:
        idx = [b * enc.n_rounds + r - 1 for b in range(len(enc.example_ids))]
        return take(enc.Q, idx, axis=0), take(enc.A, idx, axis=0)

    def _history(self, enc: EncodedBatch, r: int, training: bool, rng) -> Tensor:
        B, R, d = len(enc.example_ids), enc.n_rounds, self.config.hidden
        rows = history_rows(r, self.config.history_k)
        flat = []
        for b in range(B):
            keep = rows
            if training and self.config.round_dropout:
                plan = round_dropout(r, len(rows), rng)
                keep = [rows[i - 1] for i in plan.kept()]
            flat += [b * R + i for i in keep]
        return reshape(take(enc.H, flat, axis=0), (B, len(flat) // B, d))

    def head_logits(self, enc: EncodedBatch, head: str, training: bool = False,
                    rng: np.random.Generator | None = None) -> list[Tensor]:
        """Per-round ``[B x C]`` logits of one head."""
        out = []
        for r in range(1, enc.n_rounds + 1):
            q, A = self._round_inputs(enc, r)
            if head == "image_only":
                out.append(image_only_forward(enc.V, q, A, self.store, "img"))
            else:
                out.append(joint_forward(enc.V, self._history(enc, r, training, rng), q, A, self.store, "joint"))
        return out

    def forward(self, examples: Sequence, training: bool = False, rng: np.random.Generator | None = None,
                head: str | None = None) -> Tensor:
        """Logits ``[(B*R) x C]`` with rows ordered example-major (``b * R + r``).

        ``head`` picks a single head out of a fused model; by default the
        model's own output is returned.
        """
        if training and rng is None:
            raise ValueError("training forward passes need an rng")
        enc = self.encode(examples)
        kind = head or self.config.kind
        if kind not in self.config.heads and kind != self.config.kind:
            raise ConfigError(f"model {self.config.kind!r} has no {kind!r} head")
        if kind == "cdf":
            per_round = consensus_dropout_forward(
                enc,
                lambda e: self.head_logits(e, "image_only"),
                lambda e: self.head_logits(e, "joint", training, rng),
                self.config.instance_dropout, training, rng)
        else:
            per_round = self.head_logits(enc, kind, training, rng)
        B, C = per_round[0].shape
        stacked = concat([reshape(l, (B, 1, C)) for l in per_round], axis=1)
        return reshape(stacked, (B * enc.n_rounds, C))

    def predict(self, examples: Sequence, batch_size: int = 50, head: str | None = None) -> LogitMatrix:
        rows, ids = [], []
        with no_grad():
            for start in range(0, len(examples), batch_size):
                batch = examples[start:start + batch_size]
                rows.append(self.forward(batch, head=head).data)
                ids += [(ex.example_id, r) for ex in batch for r in range(1, len(ex.rounds) + 1)]
        return LogitMatrix(np.concatenate(rows), ids, provenance=head or self.config.kind)

    def describe(self) -> dict:
        return {"config": asdict(self.config), "d_v": self.d_v, "n_params": self.store.n_values(),
                "encoders": list(ENCODERS)}


def build_vocabulary(examples: Sequence) -> Vocabulary:
    seqs = []
    for ex in examples:
        seqs.append(ex.caption)
        for rd in ex.rounds:
            seqs.append(rd.question)
            seqs += rd.candidates
    return Vocabulary.build(seqs)
