"""Command line entry point: ``anderson-nn {train,table,eval}``."""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from .harness import (DATA_DIR_ENV, ExperimentSpec, checkpoint_load, checkpoint_save, emit_report, load_datasets,
                      run_experiment, table_suite)
from .optimizer import TrainConfig, evaluate, make_model


def _common(p: argparse.ArgumentParser):
    p.add_argument("--model", choices=("dnn", "cnn"), default="dnn")
    p.add_argument("--n-train", type=int, default=None, help="training subset size (default 5000 dnn, 60000 cnn)")
    p.add_argument("--eval-target", choices=("self", "test"), default="self")
    p.add_argument("--bn-eval-mode", choices=("running", "batch"), default="running")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--data-dir", default=None, help=f"MNIST directory (falls back to ${DATA_DIR_ENV})")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = reference mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anderson-nn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train one configuration and write its report")
    _common(tr)
    tr.add_argument("--accel", choices=("none", "diagonal", "coupled", "rom"), default="none")
    tr.add_argument("--window", type=int, default=4)
    tr.add_argument("--rounds", type=int, default=1)
    tr.add_argument("--epochs", type=int, default=None, help="SGD epochs when --accel none")
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--lr-scaling", choices=("per_batch", "per_sample_N"), default="per_batch")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--stop-accuracy", type=float, default=0.998)
    tr.add_argument("--max-epochs", type=int, default=1000)
    tr.add_argument("--init", choices=("he", "uniform01"), default="he")
    tr.add_argument("--safeguard", action="store_true")
    tr.add_argument("--out", default=None, help="report path (stdout when omitted)")
    tr.add_argument("--format", choices=("csv", "json"), default="csv")
    tr.add_argument("--save", default=None, help="write final parameters to this checkpoint")
    tr.add_argument("--checkpoint-dir", default=None)
    tr.add_argument("--checkpoint-interval", type=int, default=0)
    tr.add_argument("--reference", action="store_true", help="zero wall times for byte-identical reports")

    tb = sub.add_parser("table", help="reproduce one of the accuracy tables")
    tb.add_argument("which", choices=("table1", "table2", "table3"))
    tb.add_argument("--seeds", default="1", help="comma-separated seeds")
    tb.add_argument("--methods", default="diagonal,coupled")
    tb.add_argument("--budgets", default=None, help="comma-separated epoch budgets (default: the table's)")
    tb.add_argument("--n-train", type=int, default=None, help="override the table's training subset size")
    tb.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    tb.add_argument("--bn-eval-mode", choices=("running", "batch"), default="running")
    tb.add_argument("--data-dir", default=None)
    tb.add_argument("--threads", type=int, default=1)
    tb.add_argument("--out", default=None)
    tb.add_argument("--format", choices=("csv", "json"), default="csv")

    ev = sub.add_parser("eval", help="score a saved checkpoint")
    _common(ev)
    ev.add_argument("checkpoint")
    return parser


def _write(data: bytes, path: str | None):
    if path:
        with open(path, "wb") as f:
            f.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def _run(args) -> None:
    if args.command == "train":
        epochs = args.epochs if args.epochs is not None else args.window * args.rounds
        cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, lr_scaling=args.lr_scaling,
                          seed=args.seed, epochs=epochs, stop_accuracy=args.stop_accuracy,
                          max_epochs=args.max_epochs)
        spec = ExperimentSpec(model=args.model, data_dir=args.data_dir,
                              n_train_subset=args.n_train or (5000 if args.model == "dnn" else 60000),
                              eval_target=args.eval_target, accel=args.accel, window=args.window,
                              rounds=args.rounds, train=cfg, init_scheme=args.init, bn_eval_mode=args.bn_eval_mode,
                              safeguard=args.safeguard, dtype=args.dtype, out=args.out,
                              checkpoint_dir=args.checkpoint_dir, checkpoint_interval=args.checkpoint_interval,
                              reference_mode=args.reference)
        report = run_experiment(spec)
        if args.save:
            checkpoint_save(report.params, args.save, model="mlp" if args.model == "dnn" else "cnn")
        _write(emit_report(report, args.format), args.out)
    elif args.command == "table":
        report = table_suite(args.which, _ints(args.seeds), data_dir=args.data_dir,
                             methods=tuple(m for m in args.methods.split(",") if m), dtype=args.dtype,
                             bn_eval_mode=args.bn_eval_mode, budgets=_ints(args.budgets) if args.budgets else None, n_train=args.n_train)
        _write(report.to_csv() if args.format == "csv" else report.to_json(), args.out)
    elif args.command == "eval":
        spec = ExperimentSpec(model=args.model, data_dir=args.data_dir,
                              n_train_subset=args.n_train or (5000 if args.model == "dnn" else 60000),
                              eval_target=args.eval_target, bn_eval_mode=args.bn_eval_mode, dtype=args.dtype)
        model = make_model(args.model, bn_eval_mode=args.bn_eval_mode)
        params = checkpoint_load(args.checkpoint, expected=model.init(0))
        _, eval_set = load_datasets(spec)
        ev = evaluate(params, eval_set, model)
        print(f"accuracy={ev.accuracy!r} mse_loss={ev.mse_loss!r} ce_loss={ev.ce_loss!r} n={eval_set.size}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            _run(args)
    except Exception as e:  # noqa: BLE001 - surface every failure as one parsable line
        print(f"error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
