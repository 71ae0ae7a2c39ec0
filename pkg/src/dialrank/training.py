"""Loss, Adam, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import Vocabulary
from .errors import ConfigError, DataError, NumericError, ShapeError
from .fusion import LogitMatrix, write_logits
from .metrics import MetricReport, evaluate, instances_from
from .model import DialogModel, ModelConfig
from .synth import annotations
from .tensor import Tensor, backward, clear_tape, record_op

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, gt) -> Tensor:
    """Mean of -log softmax(row)[gt] over rows; a 1-D ``logits`` is one row.

    Gradient w.r.t. each row is (softmax - onehot) / n_rows.
    """
    x = logits.data
    single = x.ndim == 1
    rows = x.reshape(1, -1) if single else x
    gt = np.atleast_1d(np.asarray(gt, dtype=int))
    n, c = rows.shape
    if gt.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {gt.size} targets")
    if np.any(gt < 0) or np.any(gt >= c):
        raise IndexError(f"target index outside 0..{c - 1}")
    if not np.all(np.isfinite(rows)):
        raise NumericError("cross_entropy: non-finite logits")
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    losses = log_z - shifted[np.arange(n), gt]
    probs = np.exp(shifted - log_z[:, None])

    def back(g):
        grad = probs.copy()
        grad[np.arange(n), gt] -= 1.0
        grad *= g / n
        return (grad.reshape(x.shape),)

    return record_op(np.array(losses.mean()), [logits], back)


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``."""
    if params.keys() != grads.keys():
        raise ShapeError("parameter and gradient names differ")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient {grads[name].shape} vs parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ------------------------------------------------------------ lr schedule

@dataclass(frozen=True)
class LrSchedule:
    """Linear decrements after each epoch through ``hold_until``, then halving every epoch.

    Arithmetic is exact (decimal fractions) so that e.g. epoch 8 gives
    exactly 0.0003.  ``kind="constant"`` keeps ``base`` forever.
    """

    base: float = 0.001
    decrement: float = 0.0001
    hold_until: int = 8
    decay: float = 0.5
    kind: str = "paper"

    def __post_init__(self):
        if self.kind not in ("paper", "constant"):
            raise ConfigError(f"unknown lr schedule {self.kind!r}")
        if self.base <= 0 or self.decrement < 0 or not 0 < self.decay <= 1 or self.hold_until < 1:
            raise ConfigError("invalid lr schedule parameters")
        if self.kind == "paper" and self._linear(self.hold_until) <= 0:
            raise ConfigError("lr schedule reaches zero before the decay phase")

    def _linear(self, epoch: int) -> Fraction:
        return Fraction(str(self.base)) - Fraction(str(self.decrement)) * (epoch - 1)

    def __call__(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError(f"epochs are numbered from 1, got {epoch}")
        if self.kind == "constant":
            return float(self.base)
        if epoch <= self.hold_until:
            return float(self._linear(epoch))
        return float(self._linear(self.hold_until) * Fraction(str(self.decay)) ** (epoch - self.hold_until))


def lr_at(epoch: int) -> float:
    return LrSchedule()(epoch)


# ------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "DIALRANK-CHECKPOINT 1"


def save_checkpoint(path: str | Path, model: DialogModel) -> None:
    """Text header (JSON model description + parameter manifest) followed by float64 payload."""
    meta = {"model": asdict(model.config), "d_v": model.d_v, "vocab": model.vocab.itos}
    lines = [CHECKPOINT_MAGIC, json.dumps(meta, sort_keys=True), f"PARAMS {len(model.store)}"]
    offset = 0
    chunks = []
    for name, t in model.store.items():
        shape = ",".join(str(s) for s in t.shape) or "-"
        lines.append(f"{name} {shape} {offset}")
        offset += t.size
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    lines.append(f"PAYLOAD {offset}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode() + b"".join(chunks))


def load_checkpoint(path: str | Path) -> DialogModel:
    raw = Path(path).read_bytes()
    pos = 0
    lineno = 0

    def line() -> str:
        nonlocal pos, lineno
        end = raw.find(b"\n", pos)
        if end < 0:
            raise DataError(f"{path}:{lineno + 1}: truncated checkpoint header")
        text = raw[pos:end].decode()
        pos = end + 1
        lineno += 1
        return text

    if line() != CHECKPOINT_MAGIC:
        raise DataError(f"{path}:1: not a checkpoint (expected {CHECKPOINT_MAGIC!r})")
    try:
        meta = json.loads(line())
        config = ModelConfig(**meta["model"])
        vocab = Vocabulary(meta["vocab"][2:])
        d_v = int(meta["d_v"])
        n_params = int(line().split()[1])
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise DataError(f"{path}:{lineno}: bad checkpoint header: {exc}") from None
    manifest = []
    for _ in range(n_params):
        parts = line().split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected '<name> <shape> <offset>'")
        shape = () if parts[1] == "-" else tuple(int(s) for s in parts[1].split(","))
        manifest.append((parts[0], shape, int(parts[2])))
    total = int(line().split()[1])
    payload = np.frombuffer(raw[pos:], dtype="<f8")
    if payload.size != total:
        raise DataError(f"{path}: payload holds {payload.size} values, header promises {total}")
    model = DialogModel(config, vocab, d_v)
    if [m[0] for m in manifest] != model.store.names():
        raise DataError(f"{path}: parameter manifest does not match a {config.kind} model")
    for name, shape, offset in manifest:
        t = model.store[name]
        if t.shape != shape:
            raise DataError(f"{path}: {name} has shape {shape}, model expects {t.shape}")
        t.data = payload[offset:offset + t.size].reshape(shape).astype(np.float64)
    return model


# ------------------------------------------------------------- evaluation

def report_for(mat: LogitMatrix, examples: Sequence, kind: str | None = None) -> MetricReport:
    """Metrics of ``mat`` against the examples' annotations, optionally for one question kind."""
    anns = annotations(examples)
    inst = instances_from(mat.values, mat.ids, anns)
    if kind is not None:
        kinds = [rd.kind for ex in examples for rd in ex.rounds]
        by_key = {(a.example_id, a.round): k for a, k in zip(anns, kinds)}
        inst = [x for x, key in zip(inst, mat.ids) if by_key[key] == kind]
    return evaluate(inst)


# ----------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_schedule: str = "paper"
    base_lr: float = 0.001
    seed: int = 0
    eval_batch_size: int = 50

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        self.schedule()

    def schedule(self) -> LrSchedule:
        return LrSchedule(base=self.base_lr, kind=self.lr_schedule)


@dataclass
class TrainResult:
    model: DialogModel
    history: list[dict]
    best_epoch: int
    best_report: MetricReport
    logits: LogitMatrix


def _snapshot(model: DialogModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.store.arrays().items()}


def train(model: DialogModel, train_examples: Sequence, eval_examples: Sequence, config: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Train with Adam on mean cross-entropy over every (example, round) instance.

    After each epoch the model is evaluated on ``eval_examples``; the
    parameters with the best NDCG (earliest epoch on ties) are restored at the
    end.  With ``out_dir`` the checkpoint, eval logits and a JSON-lines log
    are written there.
    """
    config.validate()
    if not train_examples or not eval_examples:
        raise DataError("training needs non-empty train and eval splits")
    schedule = config.schedule()
    shuffle_seed, dropout_seed = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    state = AdamState()
    history: list[dict] = []
    best = (-np.inf, 0, None, None)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    for epoch in range(1, config.epochs + 1):
        lr = schedule(epoch)
        order = shuffle_rng.permutation(len(train_examples))
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_examples[i] for i in order[start:start + config.batch_size]]
            gt = [rd.gt_index for ex in batch for rd in ex.rounds]
            clear_tape()
            try:
                loss = cross_entropy(model.forward(batch, training=True, rng=dropout_rng), gt)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError("loss is not finite")
            except NumericError as exc:
                clear_tape()
                ids = ", ".join(ex.example_id for ex in batch)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi} ({ids}): {exc}") from None
            model.store.zero_grad()
            backward(loss)
            clear_tape()
            new = adam_step(model.store.arrays(), model.store.grads(), state, lr)
            for name, arr in new.items():
                model.store[name].data = arr
            total += value * len(gt)
            count += len(gt)

        logits = model.predict(eval_examples, config.eval_batch_size)
        report = report_for(logits, eval_examples)
        record = {"epoch": epoch, "lr": lr, "loss": total / count, "metrics": asdict(report)}
        history.append(record)
        log.info("epoch %d lr %.6g loss %.4f ndcg %.4f r@1 %.4f", epoch, lr, record["loss"],
                 report.ndcg or 0.0, report.r1)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        score = report.ndcg if report.ndcg is not None else report.r1
        if score > best[0]:
            best = (score, epoch, _snapshot(model), (report, logits))

    _, best_epoch, params, (best_report, best_logits) = best
    for name, arr in params.items():
        model.store[name].data = arr
    if out is not None:
        save_checkpoint(out / "model.ckpt", model)
        write_logits(out / "eval.logits", best_logits)
    return TrainResult(model, history, best_epoch, best_report, best_logits)

