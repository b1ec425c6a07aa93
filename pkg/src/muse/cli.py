"""Command line entry point: data generation, training, evaluation, sweeps,
gradient checking, and exchange inspection.

Config resolution order: package defaults, then --config JSON file, then
individual flags; later sources win.  Unknown flags or subcommands exit 2
(argparse usage error); invalid configuration exits 1 naming the field.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time

from muse import checks
from muse import data as D
from muse import harness
from muse.config import RunConfig, config_from_dict, load_config_file
from muse.harness import NonFiniteLossError
from muse.tensor import ConfigError, ShapeError

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

_SWEEP_PARAMS = ("theta", "mu", "eta", "variant")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="JSON config file; flags override it")
    group = parser.add_argument_group("config overrides")
    for field, kind in (
        ("task", str), ("variant", str), ("d", int), ("num-layers", int),
        ("heads", int), ("mu", int), ("eta", int), ("theta", float),
        ("alpha", float), ("beta", float), ("lr", float), ("crf-lr", float),
        ("batch-size", int), ("epochs", int), ("dropout", float),
        ("head-dropout", float), ("noise-std", float), ("seed", int),
        ("data-dir", str), ("out-dir", str), ("max-seq-len", int),
        ("vocab-size", int), ("qlevels", int),
    ):
        group.add_argument("--" + field, type=kind, default=None)
    group.add_argument(
        "--noise-enabled", action=argparse.BooleanOptionalAction, default=None
    )


_CONFIG_FIELDS = tuple(RunConfig.__dataclass_fields__)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    record = load_config_file(args.config).to_dict() if args.config else {}
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            record[name] = value
    return config_from_dict(record).validate()


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = D.TaskConfig(
        task=args.task, train_size=args.train_size, val_size=args.val_size,
        test_size=args.test_size, seed=args.seed, noise_pixels=args.noise_pixels,
    ).validate()
    splits = D.generate_task(cfg)
    os.makedirs(args.out, exist_ok=True)
    for name in ("train", "val", "test"):
        path = os.path.join(args.out, name + ".jsonl")
        examples = splits.split(name)
        D.save_jsonl(examples, path, cfg.task)
        print("wrote %d %s examples to %s" % (len(examples), cfg.task, path))
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    result = harness.train(config)
    for row in result.log_rows:
        print(
            "epoch %d  train_loss %.4f  task %.4f  it %.4f  ti %.4f  val %.4f  (%.1fs)"
            % (row.epoch, row.train_loss, row.l_task, row.l_it, row.l_ti,
               row.val_metric, row.seconds)
        )
    print("best epoch %d  val %.4f" % (result.best_epoch, result.best_val_metric))
    print("test " + json.dumps(result.test_metrics, sort_keys=True))
    print("checkpoint %s" % result.checkpoint_path)
    print("log %s" % result.log_path)
    return 0


def _cmd_eval(args) -> int:
    model, _manifest = harness.load_checkpoint(args.checkpoint)
    data_dir = args.data_dir if args.data_dir is not None else model.config.data_dir
    splits = harness.load_splits(data_dir, model.config.task)
    metrics = harness.evaluate_model(model, splits.split(args.split))
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    suites = (
        ("op", checks.op_grad_cases(), range(20), OP_TOLERANCE),
        ("nn", checks.nn_grad_cases(), range(20), OP_TOLERANCE),
        ("model", checks.model_grad_cases(), range(2), MODEL_TOLERANCE),
    )
    failed = []
    for label, cases, seeds, tolerance in suites:
        errors = checks.run_op_suite(cases, seeds=seeds, h=1e-3)
        for name, err in sorted(errors.items()):
            ok = err < tolerance
            print("%-36s %.3e  %s" % (name, err, "ok" if ok else "FAIL"))
            if not ok:
                failed.append(name)
        print("%s suite: %d cases, tolerance %g" % (label, len(errors), tolerance))
    if failed:
        print("gradcheck: FAIL (%s)" % ", ".join(failed))
        return 1
    print("gradcheck: PASS")
    return 0


def _parse_sweep_values(param: str, raw: str) -> list:
    kind = {"theta": float, "mu": int, "eta": int, "variant": str}[param]
    values = []
    for piece in raw.split(","):
        piece = piece.strip()
        if not piece:
            raise ConfigError("empty value in --values %r" % (raw,))
        try:
            values.append(kind(piece))
        except ValueError:
            raise ConfigError("--values entry %r is not a valid %s" % (piece, param))
    return values


def _sweep_job(base: RunConfig, param: str, value, splits) -> tuple:
    config = base.replace(**{param: value})
    config = config.replace(
        out_dir=os.path.join(base.out_dir, "sweep_%s" % param, str(value))
    )
    try:
        config.validate()
    except ConfigError as exc:
        # unsupported combination (e.g. only_image on mner): keep the row so
        # the table still covers every requested value
        print("sweep: skipping %s=%r: %s" % (param, value, exc), file=sys.stderr)
        return (value, None, None, None)
    started = time.perf_counter()
    result = harness.train(config, splits=splits)
    seconds = time.perf_counter() - started
    return (value, result.best_val_metric, result.test_metrics["metric"], seconds)


def _cmd_sweep(args) -> int:
    base = _resolve_config(args)
    values = _parse_sweep_values(args.param, args.values)
    splits = harness.load_splits(base.data_dir, base.task)
    raw_threads = os.environ.get("MUSE_THREADS", "1")
    try:
        threads = int(raw_threads)
    except ValueError:
        raise ConfigError("MUSE_THREADS must be an integer, got %r" % (raw_threads,))
    if threads < 1:
        raise ConfigError("MUSE_THREADS must be >= 1, got %d" % threads)

    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_sweep_job, base, args.param, v, splits) for v in values]
        rows = [f.result() for f in futures]

    out_path = args.out
    if out_path is None:
        os.makedirs(base.out_dir, exist_ok=True)
        out_path = os.path.join(base.out_dir, "sweep_%s.csv" % args.param)
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["param", "value", "seed", "val_metric", "test_metric", "seconds"])
        for value, val_metric, test_metric, seconds in rows:
            writer.writerow([
                args.param, value, base.seed,
                "" if val_metric is None else val_metric,
                "" if test_metric is None else test_metric,
                "" if seconds is None else seconds,
            ])
    print("wrote %d rows to %s" % (len(rows), out_path))
    return 0


def _cmd_inspect_exchange(args) -> int:
    model, _manifest = harness.load_checkpoint(args.checkpoint)
    config = model.config
    data_dir = args.data_dir if args.data_dir is not None else config.data_dir
    splits = harness.load_splits(data_dir, config.task)
    examples = splits.split(args.split)
    if not 0 <= args.index < len(examples):
        raise ConfigError(
            "index %d out of range for %s split of %d examples"
            % (args.index, args.split, len(examples))
        )
    result = harness.forward_example(model, examples[args.index], collect_trace=True)
    if result.trace is None:
        raise ConfigError("variant %r runs no exchange layers" % (config.variant,))
    record = {
        "task": config.task,
        "split": args.split,
        "index": args.index,
        "theta": config.theta,
        "mu": config.mu,
        "eta": config.eta,
    }
    record.update(result.trace.to_json_dict())
    text = json.dumps(record, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(text + "\n")
        print("wrote exchange trace to %s" % args.out)
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="muse",
        description="Exchanging-based multimodal fusion on synthetic tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write train/val/test JSONL splits")
    gen.add_argument("--task", required=True, choices=("mner", "msa"))
    gen.add_argument("--out", required=True, metavar="DIR")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--train-size", type=int, default=2000)
    gen.add_argument("--val-size", type=int, default=500)
    gen.add_argument("--test-size", type=int, default=500)
    gen.add_argument("--noise-pixels", type=int, default=4)
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", help="train a model and keep the best checkpoint")
    _add_config_flags(train)
    train.set_defaults(func=_cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data-dir", default=None)
    evaluate.add_argument("--split", default="test", choices=("train", "val", "test"))
    evaluate.set_defaults(func=_cmd_eval)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    grad.set_defaults(func=_cmd_gradcheck)

    sweep = sub.add_parser("sweep", help="train once per value of one parameter")
    sweep.add_argument("--param", required=True, choices=_SWEEP_PARAMS)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--out", default=None, metavar="FILE", help="CSV path")
    _add_config_flags(sweep)
    sweep.set_defaults(func=_cmd_sweep)

    inspect = sub.add_parser(
        "inspect-exchange", help="dump the exchange trace for one example as JSON"
    )
    inspect.add_argument("--checkpoint", required=True)
    inspect.add_argument("--data-dir", default=None)
    inspect.add_argument("--split", default="val", choices=("train", "val", "test"))
    inspect.add_argument("--index", type=int, default=0)
    inspect.add_argument("--out", default=None, metavar="FILE")
    inspect.set_defaults(func=_cmd_inspect_exchange)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code is None else exc.code
    try:
        return args.func(args)
    except (ConfigError, ShapeError, NonFiniteLossError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print("error: invalid JSON: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
