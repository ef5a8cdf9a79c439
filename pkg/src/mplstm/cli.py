"""``mplstm`` command line: synth, train, eval, gradcheck, bench."""

import argparse
import logging
import statistics
import sys
import time

from .data import DatasetFormatError, ModSumSpec, gen_modsum, read_dataset, write_dataset
from .experiment import (
    ExperimentConfig, ModelFormatError, emit_metrics_csv, format_real, load_model, save_model,
)
from .mathcore import Rng, ShapeError
from .network import ConfigError, ScoreFusion
from .training import TOLERANCE, OptimizerState, build_model, evaluate, fit, gradcheck, train_epoch

EXIT_GRADCHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_COMMAND = 3
EXIT_IO = 4
EXIT_CONFIG = 5
EXIT_BAD_FILE = 6

COMMANDS = ("synth", "train", "eval", "gradcheck", "bench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser():
    parser = _Parser(prog="mplstm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset pair")
    p.add_argument("--task", choices=["modsum"], default="modsum")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--train-samples", type=int, default=2000)
    p.add_argument("--test-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("train", help="train a model and write per-epoch metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", required=True)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="time training and inference")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--reps", type=int, default=3)
    return parser


def cmd_synth(args):
    rng = Rng(args.seed)
    for split, count in (("train", args.train_samples), ("test", args.test_samples)):
        spec = ModSumSpec(num_classes=args.k, length=args.n, noise_std=args.noise, num_samples=count)
        path = f"{args.out_prefix}.{split}.mps"
        write_dataset(path, gen_modsum(spec, rng))
        print(f"wrote {path} ({count} samples)")
    return 0


def _model_for(experiment, data):
    m, _, d = data.shape
    return build_model(experiment.network_config(m, d, data.num_classes), experiment.seed)


def cmd_train(args):
    experiment = ExperimentConfig.load(args.config)
    train = read_dataset(args.train)
    val = read_dataset(args.val)
    if train.shape[0] != val.shape[0] or train.shape[2] != val.shape[2] or train.num_classes != val.num_classes:
        raise ConfigError("train and validation sets disagree on m, d or K")
    model = _model_for(experiment, train)
    rows = fit(model, train, val, experiment.train_config())
    save_model(args.out, model, experiment)
    emit_metrics_csv(args.metrics, rows)
    _, _, _, val_loss, val_acc = rows[-1]
    print(f"final val_loss {format_real(val_loss)} val_acc {format_real(val_acc)}")
    return 0


def cmd_eval(args):
    model, _ = load_model(args.model)
    data = read_dataset(args.data)
    result = evaluate(model, data)
    print(f"loss {format_real(result.loss)}")
    print(f"accuracy {format_real(result.accuracy)}")
    print("confusion (rows true, columns predicted)")
    for row in result.confusion:
        print(" ".join(str(int(c)) for c in row))
    return 0


def cmd_gradcheck(args):
    rows = gradcheck(args.seed)
    failed = 0
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        print(f"{status:4s} max_rel_err {row.max_error:.3e}  {row.label}")
        if not row.passed:
            failed += 1
            worst = max(row.errors, key=row.errors.get)
            print(f"     worst tensor {worst}: {row.errors[worst]:.3e}")
    print(f"{len(rows) - failed}/{len(rows)} configurations below {TOLERANCE:g}")
    return EXIT_GRADCHECK_FAILED if failed else 0


def _networks(model):
    return model.models if isinstance(model, ScoreFusion) else [model]


def cmd_bench(args):
    if args.reps < 1:
        raise UsageError("mplstm bench: --reps must be >= 1")
    experiment = ExperimentConfig.load(args.config)
    data = read_dataset(args.data)
    cfg = experiment.train_config()
    epoch_times, fwd_times, bwd_times = [], [], []
    for rep in range(args.reps):
        model = _model_for(experiment, data)
        rng = Rng(experiment.seed + rep)
        t0 = time.perf_counter()
        for p, net in enumerate(_networks(model)):
            view = data.view(p) if isinstance(model, ScoreFusion) else data
            train_epoch(net, view, cfg, rng, OptimizerState.for_config(cfg))
        epoch_times.append(time.perf_counter() - t0)

        fwd = bwd = 0.0
        for p, net in enumerate(_networks(model)):
            X = data.features[:, p:p + 1] if isinstance(model, ScoreFusion) else data.features
            t0 = time.perf_counter()
            trace = net.forward(X)
            t1 = time.perf_counter()
            net.backward(trace, data.labels)
            fwd += t1 - t0
            bwd += time.perf_counter() - t1
        fwd_times.append(fwd / len(data))
        bwd_times.append(bwd / len(data))
    print(f"cell {experiment.cell} fusion {experiment.fusion} "
          f"{'bi' if experiment.bidirectional else 'uni'} hidden {experiment.hidden} samples {len(data)}")
    print(f"epoch_seconds_median {statistics.median(epoch_times):.6g}")
    print(f"forward_seconds_per_sequence {statistics.median(fwd_times):.6g}")
    print(f"backward_seconds_per_sequence {statistics.median(bwd_times):.6g}")
    return 0


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if command is not None and command not in COMMANDS:
        print(f"mplstm: unknown command {command!r} (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return EXIT_UNKNOWN_COMMAND
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError) as exc:
        print(f"mplstm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, ModelFormatError) as exc:
        print(f"mplstm: bad file: {exc}", file=sys.stderr)
        return EXIT_BAD_FILE
    except OSError as exc:
        print(f"mplstm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mplstm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(run())
