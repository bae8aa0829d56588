"""Command-line entry point: ``clustercond <command> [options]``.

Exit codes: 0 success, 1 usage or parameter error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings

from ..errors import DataError, NumericalError, ParameterError
from . import commands
from .config import ExperimentConfig
from .reproduce import TRENDS, cmd_reproduce

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="report format (default csv)")
    common.add_argument("--labels-col", action="store_true",
                        help="CSV input: last column holds integer labels")

    p = _Parser(prog="clustercond", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write synthetic training and held-out data")
    sub.add_parser("cluster", parents=[common], help="cluster features (k-means, TEMI, labels, pseudo)")
    b = sub.add_parser("bound", parents=[common], help="utilization-based upper cluster bound")
    b.add_argument("--timing", action="store_true", help="record per-probe wall time")
    t = sub.add_parser("train", parents=[common], help="train diffusion models with milestone checkpoints")
    t.add_argument("--resume", help="continue from this checkpoint")
    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, help="number of samples (default from config)")
    s.add_argument("--noise-seed", type=int, help="seed for the initial noise, shareable across models")
    s.add_argument("--dump-noise", action="store_true", help="also write the initial noise")
    s.add_argument("--output", help="sample file path")
    e = sub.add_parser("eval", parents=[common], help="metrics for sample files")
    e.add_argument("samples", nargs="+")
    e.add_argument("--reference", required=True, help="held-out feature file")
    e.add_argument("--uncond", help="unconditional samples for uFID")
    e.add_argument("--train-data", help="training features for 1-NN AUROC")
    e.add_argument("--temi-model", help="TEMI checkpoint for MSP extremes and condition agreement")
    r = sub.add_parser("reproduce", parents=[common], help="run a desk-scale trend protocol")
    r.add_argument("trend", help="one of: " + ", ".join(TRENDS))
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["out"] = args.out
    if args.labels_col and cfg.data.path is not None:
        kw["data"] = cfg.data.__class__(cfg.data.path, cfg.data.format, True, None)
    return cfg.replace(**kw) if kw else cfg


def run(args) -> int:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "reproduce" and args.trend not in TRENDS:
        raise ParameterError(f"unknown trend {args.trend!r}; choose from {', '.join(TRENDS)}")
    commands.out_dir(cfg)
    cfg.save(f"{cfg.out}/config.json")
    if cmd == "gen-data":
        for p in commands.cmd_gen_data(cfg):
            print(p)
    elif cmd == "cluster":
        for row in commands.cmd_cluster(cfg, args.format):
            print(row)
    elif cmd == "bound":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rep = commands.cmd_bound(cfg, timing=args.timing)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        print(f"C_max = {rep.C_max}" + (" (warning: threshold met at C_start)" if rep.warning else ""))
    elif cmd == "train":
        if args.resume:
            tr = commands.cmd_resume(cfg, args.resume)
            print(f"resumed to {tr.samples_seen} samples")
        else:
            for d in commands.cmd_train(cfg):
                print(d)
    elif cmd == "sample":
        print(commands.cmd_sample(cfg, args.checkpoint, args.output, args.noise_seed, args.n,
                                  args.dump_noise))
    elif cmd == "eval":
        rows = commands.cmd_eval(cfg, args.samples, args.reference, args.uncond, args.train_data,
                                 args.temi_model, args.format)
        for row in rows:
            print(row)
    elif cmd == "reproduce":
        verdict = cmd_reproduce(cfg, args.trend, args.format)
        print(f"{args.trend}: {'PASS' if verdict['pass'] else 'FAIL'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ParameterError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
