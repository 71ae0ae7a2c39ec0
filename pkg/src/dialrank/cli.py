"""Command-line interface: ``dialrank {gen,train,predict,eval,ensemble,complementarity,ablate}``.

Every command prints a one-line JSON summary followed by a human-readable
table when it produces metrics.  Exit codes: 0 success, 1 usage or config
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import synth
from .errors import ConfigError, DataError, NumericError, ShapeError
from .fusion import LogitMatrix, ensemble, read_logits, write_logits
from .metrics import complementarity, evaluate, format_table, instances_from, read_annotations
from .model import MODEL_KINDS, DialogModel, ModelConfig, build_vocabulary
from .training import TrainConfig, load_checkpoint, report_for, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    """Everything a run can be configured with; loaded from a JSON file."""

    seed: int = 0
    data: synth.DatasetConfig = field(default_factory=synth.DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(raw, cls, "config")
        cfg = cls(seed=int(raw.get("seed", 0)))
        for section, typ in (("data", synth.DatasetConfig), ("model", ModelConfig), ("train", TrainConfig)):
            values = raw.get(section, {})
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _reject_unknown(values, typ, section)
            setattr(cfg, section, typ(**values))
        try:
            cfg.data.validate()
            cfg.model.validate()
            cfg.train.validate()
        except TypeError as exc:
            raise ConfigError(f"config value has the wrong type: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


def _reject_unknown(values: dict, typ, where: str) -> None:
    known = {f.name for f in fields(typ)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


# ----------------------------------------------------------------- helpers

def _emit(payload: dict, table: str | None = None) -> None:
    print(json.dumps(payload, sort_keys=True))
    if table:
        print(table)


def _parse_ks(text: str) -> list[int | None]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if part == "full":
            out.append(None)
        else:
            try:
                out.append(int(part))
            except ValueError:
                raise ConfigError(f"history sizes must be integers or 'full', got {part!r}") from None
    return out


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _configure(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# ----------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _configure(args)
    data = cfg.data
    data.seed = cfg.seed
    if args.n_examples is not None:
        data.n_examples = args.n_examples
    if args.history_fraction is not None:
        data.history_fraction = args.history_fraction
    dataset = synth.generate(data)
    synth.save(dataset, args.out)
    _emit({"out": str(args.out),
           "splits": {n: len(ex) for n, ex in dataset.splits.items()},
           "history_fraction": {n: synth.history_fraction(ex) for n, ex in dataset.splits.items()}})
    return EXIT_OK


def _train_one(cfg: RunConfig, dataset: synth.Dataset, out: Path, eval_split: str) -> tuple:
    train_examples = dataset.splits["train"]
    eval_examples = dataset.splits[eval_split]
    vocab = build_vocabulary(train_examples)
    model = DialogModel(cfg.model, vocab, dataset.config.d_v)
    result = train(model, train_examples, eval_examples, cfg.train, out)
    return result, eval_examples


def _load_dataset(path) -> synth.Dataset:
    try:
        return synth.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {exc.filename}") from None


def cmd_train(args) -> int:
    cfg = _configure(args)
    cfg.model.seed = cfg.train.seed = cfg.seed
    if args.model is not None:
        cfg.model.kind = args.model
    for flag, section, name in (("round_dropout", "model", "round_dropout"), ("p", "model", "instance_dropout"),
                                ("history_k", "model", "history_k"), ("epochs", "train", "epochs"),
                                ("lr", "train", "base_lr"), ("lr_schedule", "train", "lr_schedule"),
                                ("batch_size", "train", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    cfg.model.validate()
    dataset = _load_dataset(args.data)
    if args.eval_split not in dataset.splits:
        raise ConfigError(f"no split {args.eval_split!r} in {args.data}")
    out = Path(args.out)
    result, eval_examples = _train_one(cfg, dataset, out, args.eval_split)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    rep = result.best_report
    _emit({"model": cfg.model.kind, "best_epoch": result.best_epoch, "metrics": asdict(rep),
           "checkpoint": str(out / "model.ckpt"), "logits": str(out / "eval.logits")},
          format_table([(cfg.model.kind, rep)]))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    examples = synth.load_examples(args.dialogs)
    mat = model.predict(examples, head=args.head)
    write_logits(args.out, mat)
    _emit({"logits": str(args.out), "instances": len(mat), "provenance": mat.provenance})
    return EXIT_OK


def _report_rows(mat: LogitMatrix, anns, dialogs, name: str) -> tuple[dict, list]:
    rep = evaluate(instances_from(mat.values, mat.ids, anns))
    payload = {"metrics": asdict(rep)}
    rows = [(name, rep)]
    if dialogs is not None:
        examples = synth.load_examples(dialogs)
        for kind in ("image", "history"):
            try:
                sub = report_for(mat, examples, kind)
            except ValueError:
                continue
            payload[f"metrics_{kind}"] = asdict(sub)
            rows.append((f"{name}[{kind}]", sub))
    return payload, rows


def cmd_eval(args) -> int:
    mat = read_logits(args.logits)
    anns = read_annotations(args.annotations)
    payload, rows = _report_rows(mat, anns, args.dialogs, Path(args.logits).stem)
    _emit(payload, format_table(rows))
    return EXIT_OK


def cmd_ensemble(args) -> int:
    if len(args.logits) < 2:
        raise ConfigError("ensemble needs at least two logit files")
    mats = [read_logits(p) for p in args.logits]
    merged, _ = ensemble(mats)
    write_logits(args.out, merged)
    payload = {"out": str(args.out), "members": [str(p) for p in args.logits]}
    table = None
    if args.annotations:
        extra, rows = _report_rows(merged, read_annotations(args.annotations), args.dialogs, "ensemble")
        payload.update(extra)
        table = format_table(rows)
    _emit(payload, table)
    return EXIT_OK


def cmd_complementarity(args) -> int:
    anns = read_annotations(args.annotations)
    a, b = read_logits(args.first), read_logits(args.second)
    if a.ids != b.ids:
        raise DataError("the two logit files cover different instances")
    ia = instances_from(a.values, a.ids, anns)
    ib = instances_from(b.values, b.ids, anns)
    comp = complementarity(ia, ib)
    r1a, r1b = evaluate(ia).r1, evaluate(ib).r1
    _emit({"r1_first": r1a, "r1_second": r1b, **asdict(comp)},
          "\n".join([f"{'':<14}{'R@1':>8}{'NDCG':>8}",
                     f"{'Intersection':<14}{100 * comp.r1_intersection:>8.2f}{_pct(comp.ndcg_intersection):>8}",
                     f"{'Union':<14}{100 * comp.r1_union:>8.2f}{_pct(comp.ndcg_union):>8}"]))
    return EXIT_OK


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def cmd_ablate(args) -> int:
    """Rows FULL, H-k..., Img-only: joint models with limited history next to the image-only model."""
    cfg = _configure(args)
    cfg.model.seed = cfg.train.seed = cfg.seed
    for flag, name in (("epochs", "epochs"), ("lr", "base_lr"), ("lr_schedule", "lr_schedule")):
        if getattr(args, flag) is not None:
            setattr(cfg.train, name, getattr(args, flag))
    dataset = _load_dataset(args.data)
    eval_examples = dataset.splits[args.eval_split]
    root = Path(args.out)
    rows = []
    ks = _parse_ks(args.ks)
    ks = [None] * (None in ks) + [k for k in ks if k is not None]
    specs = [("FULL" if k is None else f"H-{k}", "joint", k) for k in ks]
    specs.append(("Img-only", "image_only", None))
    for label, kind, k in specs:
        ckpt = root / label / "model.ckpt"
        if ckpt.exists():
            model = load_checkpoint(ckpt)
        elif args.train:
            cfg.model.kind, cfg.model.history_k = kind, k
            result, _ = _train_one(cfg, dataset, root / label, args.eval_split)
            model = result.model
        else:
            raise DataError(f"missing checkpoint {ckpt} (pass --train to train it)")
        mat = model.predict(eval_examples)
        write_logits(root / label / "eval.logits", mat)
        rows.append((label, report_for(mat, eval_examples)))
    _emit({label: asdict(rep) for label, rep in rows}, format_table(rows))
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dialrank", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, type=Path, help="dataset directory to create")
    g.add_argument("--seed", type=int, help="generator seed (default 0)")
    g.add_argument("--config", type=Path, help="JSON run config")
    g.add_argument("--n-examples", type=int, help="dialogs across all splits")
    g.add_argument("--history-fraction", type=float, help="share of history-dependent questions")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write checkpoint, eval logits and log")
    t.add_argument("--data", required=True, type=Path, help="dataset directory from gen")
    t.add_argument("--out", required=True, type=Path, help="run directory")
    t.add_argument("--model", choices=MODEL_KINDS, help="default joint")
    t.add_argument("--round-dropout", type=_on_off, metavar="{on,off}", help="drop up to 3 history rounds in training")
    t.add_argument("--p", type=float, help="instance dropout probability (cdf)")
    t.add_argument("--history-k", type=int, help="keep only the k most recent QA rounds")
    t.add_argument("--epochs", type=int, help="default 30")
    t.add_argument("--lr", type=float, help="base learning rate")
    t.add_argument("--lr-schedule", choices=("paper", "constant"), help="default paper")
    t.add_argument("--batch-size", type=int, help="dialogs per step (default 8)")
    t.add_argument("--eval-split", default="val", help="split used for model selection")
    t.add_argument("--seed", type=int, help="seeds init, shuffling and dropout")
    t.add_argument("--config", type=Path, help="JSON run config; flags override it")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="score a dialog file with a checkpoint")
    pr.add_argument("--checkpoint", required=True, type=Path)
    pr.add_argument("--dialogs", required=True, type=Path)
    pr.add_argument("--out", required=True, type=Path, help="logit file to write")
    pr.add_argument("--head", choices=("image_only", "joint"), help="one head of a cdf model")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metrics of a logit file")
    e.add_argument("--logits", required=True, type=Path)
    e.add_argument("--annotations", required=True, type=Path)
    e.add_argument("--dialogs", type=Path, help="also report per question kind")
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="sum logit files and evaluate the result")
    en.add_argument("logits", nargs="+", type=Path)
    en.add_argument("--out", required=True, type=Path)
    en.add_argument("--annotations", type=Path, help="evaluate the merged logits")
    en.add_argument("--dialogs", type=Path, help="also report per question kind")
    en.set_defaults(func=cmd_ensemble)

    c = sub.add_parser("complementarity", help="R@1/NDCG intersection and union of two models")
    c.add_argument("first", type=Path)
    c.add_argument("second", type=Path)
    c.add_argument("--annotations", required=True, type=Path)
    c.set_defaults(func=cmd_complementarity)

    a = sub.add_parser("ablate", help="history-size ablation table")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path, help="one run directory per row")
    a.add_argument("--ks", default="0,1,full", help="comma list of history sizes; 'full' for all")
    a.add_argument("--train", action="store_true", help="train rows whose checkpoint is missing")
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--lr-schedule", choices=("paper", "constant"))
    a.add_argument("--eval-split", default="val")
    a.add_argument("--seed", type=int)
    a.add_argument("--config", type=Path)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dialrank: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dialrank: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, OSError) as exc:
        print(f"dialrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
