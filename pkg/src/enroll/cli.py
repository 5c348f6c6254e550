"""Command-line entry point: gen-data, train, eval, match, explain."""
from __future__ import annotations

import argparse
import json
import os
import sys

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("ENROLL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from pathlib import Path  # noqa: E402

from . import numkernel as nk  # noqa: E402
from .aligner import heatmap_rows, write_heatmap_csv  # noqa: E402
from .datamodel import Dataset, ValidationError, split_dataset  # noqa: E402
from .matcher import Matcher  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .model import EnrollModel, ModelConfig, load_model, save_model  # noqa: E402
from .nir import UnitTable  # noqa: E402
from .synthgen import GenConfig, gen_dataset, write_dataset  # noqa: E402
from .trainer import TrainConfig, fit, majority_label, train_vocabularies  # noqa: E402

SPLITS = ("train", "dev", "test")


class DataError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enroll", description="Patient-trial matching by entailment.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic trials/patients/labels corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config", help="flat key=value generator config file")
    g.add_argument("--trials", type=int)
    g.add_argument("--patients", type=int)
    g.add_argument("--numeric-fraction", type=float)

    def data_args(sp, split_default="test"):
        sp.add_argument("--data", required=True, help="directory with trials/patients/labels.jsonl")
        sp.add_argument("--units", help="alternative units.json")
        sp.add_argument("--split", choices=SPLITS + ("all",), default=split_default)

    t = sub.add_parser("train", help="fit a model and write a model directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=TrainConfig.max_epochs)
    t.add_argument("--lr", type=float, default=TrainConfig.lr0)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--dropout", type=float, default=TrainConfig.dropout)
    t.add_argument("--embed-dim", type=int, default=ModelConfig.embed_dim)
    t.add_argument("--code-dim", type=int, default=ModelConfig.code_dim)
    t.add_argument("--hidden", type=int, default=ModelConfig.hidden)

    for name, helptext in (("eval", "metrics JSON for a split"),
                           ("match", "per-example decisions as JSONL")):
        e = sub.add_parser(name, help=helptext)
        data_args(e)
        e.add_argument("--checkpoint", required=True, help="model directory written by train")
        e.add_argument("--no-nir", action="store_true", help="disable the quantity override")
        e.add_argument("--out", help="output file (default stdout)")

    x = sub.add_parser("explain", help="attention heatmap CSV for (trial, patient) pairs")
    x.add_argument("--data", required=True)
    x.add_argument("--units", help="alternative units.json")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--pair", action="append", required=True, metavar="TRIAL:PATIENT")
    x.add_argument("--out", help="output CSV (default stdout)")
    return p


def _echo_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, **config}, sort_keys=True), file=sys.stderr)


def _load_data(args) -> Dataset:
    try:
        return Dataset.load(args.data)
    except FileNotFoundError as exc:
        raise DataError(f"missing data file: {exc.filename}") from None


def _units(args):
    return UnitTable.load(args.units) if getattr(args, "units", None) else None


def _select(data: Dataset, split: str, seed: int):
    if split == "all":
        return list(data.examples)
    return split_dataset(data.examples, seed)[SPLITS.index(split)]


def _open_out(path):
    return open(path, "w", encoding="utf-8", newline="") if path else sys.stdout


def cmd_gen_data(args) -> int:
    config = GenConfig.load(args.config) if args.config else GenConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("n_trials", args.trials),
                                   ("n_patients", args.patients),
                                   ("numeric_fraction", args.numeric_fraction)) if v is not None}
    config = GenConfig(**{**config.__dict__, **overrides})
    _echo_config("gen-data", {"out": args.out, "gen_config": config.__dict__})
    data = gen_dataset(config)
    write_dataset(data, args.out, config)
    d = data.dataset
    print(f"wrote {len(d.trials)} trials, {len(d.patients)} patients, {len(d.examples)} examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = _load_data(args)
    mconf = ModelConfig(embed_dim=args.embed_dim, code_dim=args.code_dim, hidden=args.hidden)
    tconf = TrainConfig(lr0=args.lr, batch_size=args.batch_size, dropout=args.dropout,
                        max_epochs=args.epochs, seed=args.seed)
    _echo_config("train", {"data": args.data, "out": args.out, "seed": args.seed,
                           "model_config": mconf.to_dict(), "train_config": tconf.to_dict()})
    train, dev, _ = split_dataset(data.examples, args.seed)
    # vocabularies come from the training split; unseen codes later map to UNK
    model = EnrollModel(train_vocabularies(data, train), mconf)
    result = fit(model, data, train, dev, tconf,
                 progress=lambda r: print(f"epoch {r.epoch} loss {r.loss:.4f} "
                                          f"dev_accuracy {r.dev_accuracy:.4f} lr {r.lr:g}", flush=True))
    save_model(args.out, model, result.params,
               {"train_config": tconf.to_dict(), "split_seed": args.seed,
                "majority_label": majority_label(train), "best_epoch": result.best_epoch})
    Path(args.out, "train_log.csv").write_text(result.log_csv(), encoding="utf-8")
    print(f"best epoch {result.best_epoch} dev_accuracy {result.best_dev_accuracy:.4f}; wrote {args.out}")
    return 0


def _matches(args):
    data = _load_data(args)
    model, params, meta = load_model(args.checkpoint)
    examples = _select(data, args.split, meta.get("split_seed", 0))
    matcher = Matcher(model, params, use_nir=not args.no_nir, units=_units(args))
    return data, meta, examples, [matcher.match(data.criteria(e), data.patients[e.patient_id])
                                  for e in examples]


def cmd_eval(args) -> int:
    _echo_config("eval", {"data": args.data, "checkpoint": args.checkpoint, "split": args.split,
                          "no_nir": args.no_nir})
    data, meta, examples, results = _matches(args)
    if not examples:
        raise DataError("selected split is empty")
    gold = [e.label for e in examples]
    report = evaluate([r.final_label for r in results], gold,
                      probs=[r.neural_probs for r in results], groups=[e.trial_id for e in examples])
    out = report.to_dict()
    majority = meta.get("majority_label")
    if majority:
        out["majority_baseline_micro_f1"] = evaluate([majority] * len(gold), gold).micro_f1
    out.update({"split": args.split, "nir": not args.no_nir})
    fh = _open_out(args.out)
    try:
        fh.write(json.dumps(out, indent=1, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_match(args) -> int:
    _echo_config("match", {"data": args.data, "checkpoint": args.checkpoint, "split": args.split,
                           "no_nir": args.no_nir})
    _, _, _, results = _matches(args)
    fh = _open_out(args.out)
    try:
        for r in results:
            fh.write(r.to_jsonl())
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_explain(args) -> int:
    _echo_config("explain", {"data": args.data, "checkpoint": args.checkpoint, "pairs": args.pair})
    data = _load_data(args)
    model, params, _ = load_model(args.checkpoint)
    matcher = Matcher(model, params, units=_units(args))
    rows = []
    for pair in args.pair:
        tid, sep, pid = pair.partition(":")
        if not sep:
            raise DataError(f"--pair expects TRIAL:PATIENT, got {pair!r}")
        if tid not in data.trials or pid not in data.patients:
            raise DataError(f"unknown trial or patient in pair {pair!r}")
        r = matcher.match(data.trials[tid], data.patients[pid])
        rows.extend(heatmap_rows(tid, r.statement_ids, pid, r.hypothesis_ids, r.beta_weights))
    write_heatmap_csv(args.out or sys.stdout, rows)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "match": cmd_match, "explain": cmd_explain}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (DataError, ValidationError, nk.DimensionError, ValueError, KeyError, OSError) as exc:
        print(f"enroll {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
