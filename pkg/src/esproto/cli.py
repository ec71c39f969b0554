"""Command-line entry point: ``esproto <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import costmodel, dist, gradcheck, trainer
from .episodes import prepare_dataset
from .nncore import EmbeddingNet


def _prepare(args):
    tables = prepare_dataset(args.raw_dir, args.out_dir, args.seed,
                             expected_characters=args.expected_characters)
    for split, table in tables.items():
        print(f"{split}: {len(table)} classes")


def _synthetic(args):
    from .synthetic import write_omniglot_shaped_tree, write_raw_tree

    if args.characters is None:
        write_omniglot_shaped_tree(args.out_dir, seed=args.seed)
    else:
        write_raw_tree(args.out_dir, alphabets=1, characters_per_alphabet=args.characters, seed=args.seed)
    print(f"wrote synthetic raw tree to {args.out_dir}")


def _train(args):
    cfg = trainer.load_config(args.config, args.override)
    summary = trainer.train(cfg, resume=not args.fresh)
    if args.csv:
        trainer.export_csv(Path(cfg.out_dir) / trainer.METRICS_NAME, Path(cfg.out_dir) / "metrics.csv")
    print(f"test accuracy {summary['test_accuracy_mean']:.4f} ± {summary['test_accuracy_std']:.4f}")


def _eval(args):
    cfg = trainer.load_config(args.config, args.override)
    mean, std, _ = trainer.evaluate(args.checkpoint, cfg, args.split, shot=args.shot, way=args.way)
    print(json.dumps({"split": args.split, "accuracy_mean": mean, "accuracy_std": std}))


def _sweep(args):
    base = trainer.load_config(args.config, args.override)
    grid = trainer.parse_grid(Path(args.grid).read_text())
    rows = trainer.sweep(base, grid, args.out_dir)
    print(trainer.format_table(rows))


def _cost(args):
    if args.maml:
        net = EmbeddingNet(channels=args.channels)
        g = args.g if args.g is not None else costmodel.protonet_inputs(args.channels, args.way, args.pop).g
        inp = costmodel.maml_inputs(net.param_count, args.pop, g, args.task_length)
    else:
        inp = costmodel.protonet_inputs(args.channels, args.way, args.pop, l=args.task_length, g=args.g)
    rep = costmodel.compute_costs(inp)
    print(costmodel.report_json(inp, rep) if args.json else costmodel.format_report(inp, rep))


def _comm(args):
    pool = dist.WorkerPool(args.workers, args.pop_per_worker)
    dim = EmbeddingNet(channels=args.channels).param_count
    print(json.dumps(dist.comm_cost(pool, dim), indent=2))


def _gradcheck(args):
    results = gradcheck.run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esproto", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="resize, rotate, split and cache raw Omniglot")
    s.add_argument("--raw-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--expected-characters", type=int, default=1623)
    s.set_defaults(func=_prepare)

    s = sub.add_parser("make-synthetic", help="write a synthetic raw tree shaped like Omniglot")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--characters", type=int, default=None, help="default: 1623")
    s.set_defaults(func=_synthetic)

    def run_args(s):
        s.add_argument("--config", default=None, help="flat key=value config file")
        s.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE")

    s = sub.add_parser("train", help="train with evolution strategies")
    run_args(s)
    s.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in out_dir")
    s.add_argument("--csv", action="store_true", help="also export step metrics as CSV")
    s.set_defaults(func=_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint with the mean model")
    run_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["val", "test"])
    s.add_argument("--shot", type=int, default=None)
    s.add_argument("--way", type=int, default=None)
    s.set_defaults(func=_eval)

    s = sub.add_parser("sweep", help="run a grid of config overrides")
    run_args(s)
    s.add_argument("--grid", required=True, help="lines of key=v1,v2,...")
    s.add_argument("--out-dir", default="runs/sweep")
    s.set_defaults(func=_sweep)

    s = sub.add_parser("cost-model", help="memory cost of BP / forward-mode / ES meta-gradients")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--way", type=int, default=10)
    s.add_argument("--pop", type=int, default=64)
    s.add_argument("--task-length", type=int, default=1)
    s.add_argument("--g", type=int, default=None, help="bytes per inner step (default: measured)")
    s.add_argument("--maml", action="store_true", help="use D_psi = D_phi")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=_cost)

    s = sub.add_parser("comm-cost", help="per-worker sampling and bytes for distribution schemes")
    s.add_argument("--workers", type=int, default=8)
    s.add_argument("--pop-per-worker", type=int, default=32)
    s.add_argument("--channels", type=int, default=16)
    s.set_defaults(func=_comm)

    s = sub.add_parser("grad-check", help="estimator vs analytical-gradient checks")
    s.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (trainer.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
