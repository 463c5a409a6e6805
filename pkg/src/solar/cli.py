"""Command-line entry point: ``solar <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import FixtureError, NumericalAbort, SolarError
from .mining import HardNegativeIndex
from .model import load_params
from .providers import save_fixture
from .pipeline import (
    RunConfig, embed_corpus, evaluate, load_data, mine, resume_stage1, save_benchmark_dir,
    train_stage1, train_stage2,
)

log = logging.getLogger("solar")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set)
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _ckpt(path):
    params, _ = load_params(path)
    return params


def cmd_synth(args) -> int:
    cfg = _config(args)
    data = load_data(cfg, with_benchmark=not args.no_benchmark)
    out = Path(cfg.out_dir)
    save_fixture(data.train + data.heldout, out / "fixture", {"synth": cfg.data.synth_config().to_dict()})
    if data.benchmark is not None:
        save_benchmark_dir(data.benchmark, out / "benchmark")
    print(f"wrote {len(data.train) + len(data.heldout)} pairs to {out / 'fixture'}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    if args.resume:
        res = resume_stage1(cfg, args.resume, out_dir=out)
    else:
        res = train_stage1(cfg, out_dir=out)
    last = res.log[-1] if res.log else {}
    print(f"stage 1 done: checkpoint {res.checkpoint}; final total {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = _config(args)
    index = mine(cfg, _ckpt(args.checkpoint), load_data(cfg).train, Path(cfg.out_dir))
    print(f"mined negatives for {len(index)} anchors into {Path(cfg.out_dir) / 'hard_negatives.jsonl'}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _config(args)
    index = HardNegativeIndex.load(args.index) if args.index else None
    res = train_stage2(cfg, _ckpt(args.checkpoint), index=index, out_dir=Path(cfg.out_dir))
    print(f"stage 2 done: checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = _config(args)
    params = _ckpt(args.checkpoint)
    data = load_data(cfg, with_benchmark=args.benchmark)
    ds = data.benchmark.samples if args.benchmark else data.train + data.heldout
    ids, _ = embed_corpus(params, ds, Path(cfg.out_dir) / "embeddings")
    print(f"embedded {len(ids)} samples")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    bench = load_data(cfg, with_benchmark=True).benchmark
    if bench is None:
        raise FixtureError("no benchmark: set benchmark.path for fixture-backed runs")
    report, _ = evaluate(cfg, _ckpt(args.checkpoint), bench, Path(cfg.out_dir), args.name)
    print(report.to_table(args.name))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_run

    written = render_run(Path(args.run))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    res = run_suite(args.instances, args.seed)
    for name, worst in res.worst().items():
        print(f"{name:14s} max rel err {worst:.3e} {'ok' if worst < args.tol else 'FAIL'}")
    print(f"{res.seconds:.1f} s")
    return EXIT_OK if res.passed(args.tol) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.set_defaults(func=fn)
        return p

    add("synth", cmd_synth, "write a synthetic fixture and benchmark").add_argument(
        "--no-benchmark", action="store_true")
    add("train-stage1", cmd_train_stage1, "train the mask-learning stage").add_argument(
        "--resume", help="intermediate Stage-1 checkpoint to continue from")
    add("mine", cmd_mine, "mine hard negatives with a Stage-1 checkpoint").add_argument(
        "--checkpoint", required=True)
    p = add("train-stage2", cmd_train_stage2, "contrastive training from a Stage-1 checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", help="hard_negatives.jsonl (mined on the fly when absent)")
    p = add("embed", cmd_embed, "write joint embeddings of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--benchmark", action="store_true", help="embed the benchmark samples instead")
    p = add("eval", cmd_eval, "evaluate a checkpoint on the benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--name", default="model")
    p = sub.add_parser("report", help="render metrics tables and loss curves to SVG")
    p.add_argument("run", help="run directory holding logs and reports")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("gradcheck", help="finite-difference suite over all objectives")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (SolarError, ValueError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
