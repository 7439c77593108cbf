"""``toxseq`` command line: vocab, train, evaluate, predict, gradcheck, export-metrics.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 training divergence, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import codec, data, gradcheck, metrics
from .model import (
    CLASSIFICATION,
    Hyperparams,
    ModelFormatError,
    load_model,
    predict_encoded,
    save_model,
)
from .train import NonFiniteLoss, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

log = logging.getLogger("toxseq")


class ConfigError(ValueError):
    pass


# -- shared helpers ----------------------------------------------------------


def _add_schema_args(p):
    p.add_argument("--preset", choices=sorted(data.PRESETS), help="built-in column layout")
    p.add_argument("--schema", help="JSON schema file (overrides --preset)")
    p.add_argument("--strict", action="store_true", help="reject rows with implausible SMILES")


def _resolve_schema(preset, schema_path) -> data.TaskSchema:
    if schema_path:
        try:
            return data.schema_from_json(json.loads(Path(schema_path).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad schema file {schema_path}: {exc}") from None
    if preset:
        return data.PRESETS[preset]
    raise ConfigError("one of --preset or --schema is required")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _print_report(report: metrics.EvalReport) -> None:
    print(f"{'task':<16} {'metric':<8} {'value':>8}" + ("   accuracy" if report.accuracy else ""))
    for name, metric, value in report.per_task:
        extra = f"   {report.accuracy[name]:.4f}" if name in report.accuracy else ""
        print(f"{name:<16} {metric:<8} {value:>8.4f}{extra}")
    for name in report.skipped:
        print(f"{name:<16} skipped (single class)")
    print(f"mean ± std: {report.mean:.4f} ± {report.std:.4f}  (n={report.n_records})")


# -- vocab -------------------------------------------------------------------


def cmd_vocab(args) -> int:
    schema = _resolve_schema(args.preset, args.schema)
    records = data.load_dataset(args.data, schema, strict=args.strict)
    vocab = codec.build_vocab([r.smiles for r in records])
    codec.save_vocab(vocab, args.out)
    print(f"wrote {vocab.size} entries to {args.out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------

HYPER_FLAGS = {
    # flag dest -> Hyperparams field
    "units": "units",
    "embed_dim": "embed_dim",
    "dropout": "dropout_rate",
    "lr": "learning_rate",
    "max_len": "max_len",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "patience": "patience",
    "clip_norm": "clip_norm",
}

TRAIN_KEYS = (
    "data", "preset", "schema", "merge_with", "merge_preset", "strict", "dedupe",
    "undersample", "undersample_task", "train_fraction", "valid_fraction", "split_seed",
    *HYPER_FLAGS,
)


def _add_train_args(p):
    p.add_argument("--config", help="resolved config.json from an earlier run")
    p.add_argument("--data", help="dataset CSV")
    _add_schema_args(p)
    p.add_argument("--merge-with", help="second classification CSV merged into a synthetic set")
    p.add_argument("--merge-preset", choices=sorted(data.PRESETS), help="preset of --merge-with")
    p.add_argument("--dedupe", action="store_true", help="drop repeated SMILES while loading")
    p.add_argument("--undersample", action="store_true", help="balance classes on one task")
    p.add_argument("--undersample-task", help="task to balance (default: the preset's primary task)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--valid-fraction", type=float, default=0.1,
                   help="share of the training split held out for model selection")
    p.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    d = Hyperparams()
    p.add_argument("--units", type=int, default=d.units)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--dropout", type=float, default=d.dropout_rate)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--max-len", type=int, default=d.max_len)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--patience", type=int, default=d.patience, help="0 disables early stopping")
    p.add_argument("--clip-norm", type=float, default=d.clip_norm, help="0 disables clipping")
    p.add_argument("--out", help="run directory (default runs/<schema>-seed<seed>)")


def resolve_train_config(args) -> dict:
    cfg = {k: getattr(args, k) for k in TRAIN_KEYS}
    if cfg["split_seed"] is None:
        cfg["split_seed"] = cfg["seed"]
    if not cfg["data"]:
        raise ConfigError("--data is required")
    return cfg


def hyperparams_from(cfg: dict) -> Hyperparams:
    kw = {field: cfg[flag] for flag, field in HYPER_FLAGS.items()}
    if kw["patience"] is not None and kw["patience"] <= 0:
        kw["patience"] = None
    if kw["clip_norm"] is not None and kw["clip_norm"] <= 0:
        kw["clip_norm"] = None
    try:
        return Hyperparams(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def prepare_splits(cfg: dict):
    """Load, merge, balance and split according to a resolved train config."""
    schema = _resolve_schema(cfg["preset"], cfg["schema"])
    records = data.load_dataset(cfg["data"], schema, strict=cfg["strict"], dedupe=cfg["dedupe"])
    if cfg["merge_with"]:
        if not cfg["merge_preset"]:
            raise ConfigError("--merge-with needs --merge-preset")
        other_schema = data.PRESETS[cfg["merge_preset"]]
        other = data.load_dataset(cfg["merge_with"], other_schema, strict=cfg["strict"], dedupe=cfg["dedupe"])
        records, schema = data.merge_synthetic(records, schema, other, other_schema)
    if cfg["undersample"]:
        task = cfg["undersample_task"] or data.PRIMARY_TASK.get(schema.name) or schema.task_names[0]
        if task not in schema.task_names:
            raise ConfigError(f"undersample task {task!r} not in {schema.task_names}")
        records = data.undersample(records, schema.task_names.index(task), cfg["split_seed"])
    train_part, test = data.split(records, data.SplitSpec(cfg["train_fraction"], cfg["split_seed"]))
    fit, valid = data.split(train_part, data.SplitSpec(1.0 - cfg["valid_fraction"], cfg["split_seed"] + 1))
    return schema, fit, valid, test


def run_training(cfg: dict, out: Path) -> metrics.EvalReport:
    config = hyperparams_from(cfg)
    schema, fit, valid, test = prepare_splits(cfg)
    vocab = codec.build_vocab([r.smiles for r in fit])
    print(
        f"{schema.name}: {len(fit)} train / {len(valid)} valid / {len(test)} test, "
        f"vocab {vocab.size}, lr={config.learning_rate} units={config.units} "
        f"dropout={config.dropout_rate}"
    )
    t0 = time.perf_counter()

    def on_epoch(rec):
        print(f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  valid {rec.valid_metric:.4f}")

    model, history = train(config, fit, valid, schema, vocab=vocab, on_epoch=on_epoch)
    report = metrics.evaluate(model, test, schema)

    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    save_model(model, out / "model.txt")
    codec.save_vocab(vocab, out / "vocab.tsv")
    _write(out / "history.csv", history.to_csv())
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    _write(out / "schema.json", json.dumps(data.schema_to_json(schema), indent=2) + "\n")
    for name, part in (("train", fit), ("valid", valid), ("test", test)):
        data.save_dataset(part, schema, out / f"{name}.csv")
    print(f"best epoch {history.best_epoch}, {time.perf_counter() - t0:.1f}s")
    _print_report(report)
    print(f"artifacts in {out}")
    return report


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out = Path(args.out or f"runs/{cfg['preset'] or 'custom'}-seed{cfg['seed']}")
    run_training(cfg, out)
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    schema = _resolve_schema(args.preset, args.schema)
    if tuple(schema.task_names) != tuple(model.task_names):
        raise data.DataError(
            f"model predicts {list(model.task_names)} but dataset has {list(schema.task_names)}"
        )
    records = data.load_dataset(args.data, schema, strict=args.strict)
    report = metrics.evaluate(model, records, schema)
    prefix = Path(args.out or "report")
    _write(prefix.with_suffix(".json"), report.to_json())
    _write(prefix.with_suffix(".csv"), report.to_csv())
    _print_report(report)
    return EXIT_OK


# -- predict -----------------------------------------------------------------


def _read_smiles(args) -> list:
    items = list(args.smiles or [])
    if args.input:
        try:
            text = Path(args.input).read_text(encoding="utf-8")
        except OSError as exc:
            raise data.DataError(f"cannot read {args.input}: {exc}") from None
        items += [line.strip() for line in text.splitlines() if line.strip()]
    if not items:
        raise ConfigError("give --smiles or --input")
    return items


def cmd_predict(args) -> int:
    model = load_model(args.model)
    smiles = _read_smiles(args)
    diagnostics = []
    for s in smiles:
        issues = codec.validate_smiles(s).issues if args.strict else ()
        diagnostics.append(";".join(f"{kind}@{pos}" for pos, kind in issues))
    good = [k for k, d in enumerate(diagnostics) if not d]
    seqs = [codec.encode(model.vocab, smiles[k], model.max_len) for k in good]
    n_trunc = sum(s.truncated for s in seqs)
    preds = predict_encoded(model, seqs)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["smiles", *model.task_names, *(["diagnostics"] if args.strict else [])])
    row_of = {k: j for j, k in enumerate(good)}
    for k, s in enumerate(smiles):
        if k in row_of:
            values = [repr(float(v)) for v in preds[row_of[k]]]
        else:
            values = [""] * model.n_tasks
        w.writerow([s, *values, *([diagnostics[k]] if args.strict else [])])
    if args.out:
        _write(Path(args.out), buf.getvalue())
        print(f"wrote {len(smiles)} predictions to {args.out}")
    else:
        sys.stdout.write(buf.getvalue())
    if n_trunc:
        log.warning("%d SMILES longer than max_len=%d were truncated", n_trunc, model.max_len)
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    worst = gradcheck.run(
        seeds=range(args.seed, args.seed + args.n_seeds),
        eps=args.eps,
        perturb=args.perturb,
    )
    for name, err in worst.items():
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{name:<12} max_rel_err {err:.3e}  {flag}")
    overall = max(worst.values())
    print(f"overall max relative error {overall:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if overall < args.tol else EXIT_GRADCHECK


# -- export-metrics ----------------------------------------------------------


def _run_name(path: Path) -> str:
    return path.parent.name if path.stem == "report" and path.parent.name else path.stem


def cmd_export_metrics(args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "task", "metric", "value"])
    for raw in args.reports:
        path = Path(raw)
        try:
            report = metrics.EvalReport.from_json(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise data.DataError(f"cannot read {path}: {exc}") from None
        run = _run_name(path)
        for name, metric, value in report.per_task:
            w.writerow([run, name, metric, repr(value)])
        w.writerow([run, "__mean__", report.metric, repr(report.mean)])
        w.writerow([run, "__std__", report.metric, repr(report.std)])
    _write(Path(args.out), buf.getvalue())
    print(f"wrote {args.out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toxseq", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vocab", help="build a character vocabulary from a dataset")
    p.add_argument("--data", required=True)
    _add_schema_args(p)
    p.add_argument("--out", default="vocab.tsv")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train a BiLSTM on a dataset")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)
    parser.train_parser = p

    p = sub.add_parser("evaluate", help="score a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_schema_args(p)
    p.add_argument("--out", help="output prefix for .json/.csv (default ./report)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-task predictions for SMILES strings")
    p.add_argument("--model", required=True)
    p.add_argument("--smiles", action="append", help="a SMILES string (repeatable)")
    p.add_argument("--input", help="file with one SMILES per line")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--strict", action="store_true", help="report implausible SMILES instead of scoring them")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-metrics", help="merge report.json files into one long CSV")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_export_metrics)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with a saved config.json as defaults; explicit flags still win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            saved = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        parser.train_parser.set_defaults(**{k: v for k, v in saved.items() if k in TRAIN_KEYS})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stdout)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, codec.EmptyString, ModelFormatError, metrics.MetricError, codec.VocabFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}; try --lr 1e-3", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
