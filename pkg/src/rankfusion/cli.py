"""Command-line driver: ``synth``, ``train``, ``rank`` and ``eval``.

Every option can also come from a flat ``key=value`` file passed with
``--config``; keys are option names without the leading dashes (``-`` and
``_`` are interchangeable, ``#`` starts a comment). Flags on the command line
override the file.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .cp import AlsConfig
from .data import MmseqParseError, SynthSpec, generate, read_dataset, write_dataset
from .experiments import (
    ACCURACY_COLUMNS,
    EPOCH_COLUMNS,
    RANK_COLUMNS,
    RANK_MEAN_COLUMNS,
    RANK_SUMMARY_COLUMNS,
    accuracy_rows,
    epoch_rows,
    prediction_grid,
    rank_analysis,
    save_checkpoints,
    train_jobs,
    write_csv,
)
from .neural.checkpoint import CheckpointError, load_checkpoint
from .neural.model import Variant, init_model
from .neural.train import TrainConfig, evaluate
from .noise import NOISE_LEVELS, NoiseSpec

log = logging.getLogger("rankfusion")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- option value parsers ----------------------------------------------------


def _list(kind):
    def parse(text):
        items = [t.strip() for t in str(text).split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        try:
            return [kind(t) for t in items]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _ranks(text):
    """``1-20`` or ``1,2,5``."""
    text = str(text).strip()
    if "-" in text and "," not in text:
        lo, hi = (int(t) for t in text.split("-", 1))
        if lo < 1 or hi < lo:
            raise argparse.ArgumentTypeError(f"bad rank range {text!r}")
        return list(range(lo, hi + 1))
    return _list(int)(text)


def _dims(text):
    dims = _list(int)(text)
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("expected one or three comma-separated ints")
    return tuple(dims)


def _optional_float(text):
    text = str(text).strip().lower()
    return None if text in ("", "none", "off") else float(text)


# -- config files --------------------------------------------------------------


def read_config(path) -> dict:
    """Parse a flat ``key=value`` file into a dict of raw strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, config: dict) -> None:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in config.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = raw.lower() in ("1", "true", "yes", "on")
            if isinstance(action, argparse._StoreFalseAction):
                value = not value
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: invalid choice {value!r}")
        defaults[key] = value
    parser.set_defaults(**defaults)
    for action in parser._actions:
        if action.dest in defaults:
            action.required = False


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(
            n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test, T=args.T,
            dims=args.dims, latent_rank=args.latent_rank, label_margin=args.label_margin,
            seed=args.seed, walk_step=args.walk_step, obs_noise=args.obs_noise,
            emission_scale=args.emission_scale,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split = generate(spec)
    write_dataset(args.out, split)
    log.info("wrote %d sequences to %s", len(split.all()), args.out)
    return 0


def _train_config(args, reg_weight=0.0) -> TrainConfig:
    return TrainConfig(
        reg_weight=reg_weight, learning_rate=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, optimizer=args.optimizer, grad_clip=args.grad_clip,
    )


def cmd_train(args) -> int:
    split = read_dataset(args.data)
    jobs = train_jobs(args.variants, args.kinds, args.levels, args.lambdas, args.seeds)
    try:
        cfg = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log.info("training %d grid cells", len(jobs))
    outcomes = prediction_grid(split, jobs, cfg, args.hidden, jobs=args.jobs)
    out = Path(args.out_dir)
    write_csv(out / "metrics.csv", ACCURACY_COLUMNS, accuracy_rows(outcomes))
    write_csv(out / "epochs.csv", EPOCH_COLUMNS, epoch_rows(outcomes))
    if not args.no_checkpoints:
        save_checkpoints(outcomes, out / "checkpoints")
    for o in outcomes:
        log.info("%s accuracy=%.4f (%s)", o.job.tag, o.accuracy, o.status)
    return 0


def cmd_rank(args) -> int:
    split = read_dataset(args.data)
    if args.random_encoder:
        params = init_model(Variant.T2FN, split.dims, args.hidden, seed=args.init_seed)
    else:
        if args.checkpoint is None:
            raise UsageError("rank needs --checkpoint or --random-encoder")
        params, _ = load_checkpoint(args.checkpoint)
    seqs = getattr(split, args.split)[: args.n_sequences]
    params.check_dims(seqs[0].dims)
    als = AlsConfig(max_iters=args.max_iters, tol=args.tol, restarts=args.restarts)
    res = rank_analysis(params, seqs, args.kinds, args.levels, args.seeds, args.ranks, als, jobs=args.jobs)
    out = Path(args.out_dir)
    write_csv(out / "rank_curves.csv", RANK_COLUMNS, res.rows())
    write_csv(out / "rank_curves_mean.csv", RANK_MEAN_COLUMNS, res.mean_rows())
    write_csv(out / "rank_summary.csv", RANK_SUMMARY_COLUMNS, res.surrogate_rows(args.threshold))
    return 0


def cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    split = read_dataset(args.data)
    seqs = getattr(split, args.split)
    params.check_dims(seqs[0].dims)
    noise = NoiseSpec(args.kind, args.p, args.seed)
    acc = evaluate(params, seqs, noise)
    print(f"accuracy={acc:.4f}")
    if args.csv:
        write_csv(args.csv, ("checkpoint", "split", "kind", "p", "seed", "accuracy"), [{
            "checkpoint": str(args.checkpoint), "split": args.split, "kind": args.kind,
            "p": args.p, "seed": args.seed, "accuracy": acc,
        }])
    return 0


# -- parser ------------------------------------------------------------------------


def _add_grid_options(p, *, levels=True):
    p.add_argument("--kinds", type=_list(str), default=["clean", "random_drop", "structured_drop"],
                   help="noise kinds, comma separated")
    if levels:
        p.add_argument("--levels", type=_list(float), default=list(NOISE_LEVELS),
                       help="drop probabilities (default 0.0,0.1,...,1.0)")
    p.add_argument("--seeds", type=_list(int), default=[0])
    p.add_argument("--hidden", type=_dims, default=(8, 8, 8), help="LSTM hidden size(s)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankfusion", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file supplying option defaults")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic MMSEQ dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-valid", type=int, default=50)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--dims", type=_dims, default=(8, 8, 8))
    p.add_argument("--latent-rank", type=int, default=3)
    p.add_argument("--label-margin", type=float, default=0.5)
    p.add_argument("--walk-step", type=float, default=0.1)
    p.add_argument("--obs-noise", type=float, default=0.01)
    p.add_argument("--emission-scale", type=float, default=3.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train models over a noise x lambda x seed grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variants", type=_list(str), default=["t2fn", "t2fn_noreg", "tfn", "ef_lstm", "lf_lstm"])
    p.add_argument("--lambdas", type=_list(float), default=[1e-4, 1e-3, 1e-2])
    _add_grid_options(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--grad-clip", type=_optional_float, default=5.0)
    p.add_argument("--no-checkpoints", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", parents=[common], help="CP rank curves of fused tensors under imperfection")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", help="T2FN/TFN checkpoint supplying the encoders")
    p.add_argument("--random-encoder", action="store_true", help="use a freshly initialized T2FN instead")
    p.add_argument("--init-seed", type=int, default=0)
    _add_grid_options(p)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--n-sequences", type=int, default=8)
    p.add_argument("--ranks", type=_ranks, default=None, help="e.g. 1-20 (default 1..T)")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--restarts", type=int, default=3)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--kind", choices=["clean", "random_drop", "structured_drop"], default="clean")
    p.add_argument("--p", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write the result as a one-row CSV")
    p.set_defaults(func=cmd_eval)
    return parser


def _parse(parser: argparse.ArgumentParser, argv):
    # first pass only finds the subcommand and its --config
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command:
        subparser = parser._subparsers._group_actions[0].choices.get(known.command)
        if subparser is not None:
            _apply_config(subparser, read_config(known.config))
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(f"rankfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"rankfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse exits on --help, --version and bad flags
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rankfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MmseqParseError, CheckpointError) as exc:
        print(f"rankfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"rankfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
