"""Command-line entry point: gen | train | bench | verify | plan."""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _bool(s: str) -> bool:
    if s.lower() not in ("true", "false"):
        raise argparse.ArgumentTypeError("expected true or false")
    return s.lower() == "true"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fs3d", allow_abbrev=False,
                                description="Mixture-of-experts interatomic potential on simulated ranks.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", allow_abbrev=False, help="generate a synthetic labeled dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n-configs", type=int, default=100)
    g.add_argument("--atoms-min", type=int, default=4)
    g.add_argument("--atoms-max", type=int, default=12)
    g.add_argument("--cell-min", type=float, default=6.0)
    g.add_argument("--cell-max", type=float, default=8.0)
    g.add_argument("--tasks", type=int, default=2)
    g.add_argument("--output", required=True)

    def run_args(q, seed_required):
        q.add_argument("--config", help="key = value run configuration file")
        q.add_argument("--data", required=True, help="dataset file (one JSON record per line)")
        q.add_argument("--seed", type=int, required=seed_required)
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    t = sub.add_parser("train", allow_abbrev=False, help="train and write a checkpoint")
    run_args(t, True)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--metrics", help="metrics stream, one JSON record per step")

    b = sub.add_parser("bench", allow_abbrev=False, help="measure throughput")
    run_args(b, False)
    b.add_argument("--steps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--output", help="write the report here as well as stdout")

    v = sub.add_parser("verify", allow_abbrev=False, help="run a verification suite")
    v.add_argument("--suite", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--full", action="store_true", help="acceptance-size instances")
    v.add_argument("--deterministic", type=_bool, default=True)
    v.add_argument("--output", help="write the JSON summary here as well as stdout")

    pl = sub.add_parser("plan", allow_abbrev=False, help="print the expert plan of the first global batch")
    run_args(pl, False)
    return p


def _load_run(args):
    from .config import RunConfig
    from .data import read_dataset
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    rc = rc.override(args.set)
    if args.seed is not None:
        rc = rc.replace(seed=args.seed)
    return rc, read_dataset(args.data)


def cmd_gen(args) -> int:
    from .data import GenConfig, generate, write_dataset
    gc = GenConfig(n_configs=args.n_configs, atoms=(args.atoms_min, args.atoms_max),
                   cell=(args.cell_min, args.cell_max), n_tasks=args.tasks)
    if gc.n_configs < 1 or gc.n_tasks < 1:
        raise ValueError("n-configs and tasks must be positive")
    write_dataset(args.output, generate(args.seed, gc))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer
    rc, ds = _load_run(args)
    tr = Trainer(rc, ds)
    fh = open(args.metrics, "w", encoding="utf-8") if args.metrics else None
    try:
        def log(m):
            if fh:
                fh.write(m.to_json() + "\n")
                fh.flush()
            print(f"step {m.step} loss {m.loss:.6g} edges/s {m.edges_per_sec:.1f}", file=sys.stderr)
        tr.run(on_step=log)
    finally:
        if fh:
            fh.close()
    tr.save(args.checkpoint)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .train import Trainer, bench_report
    t0 = time.perf_counter()
    rc, ds = _load_run(args)
    tr = Trainer(rc, ds)
    tr.run(epochs=10 ** 6, max_steps=args.steps + args.warmup)
    rep = bench_report(tr.history, args.warmup, time.perf_counter() - t0)
    _emit(rep, args.output)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite
    if args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    res = run_suite(args.suite, args.seed, quick=not args.full, deterministic=args.deterministic)
    _emit(res.to_dict(), args.output)
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_plan(args) -> int:
    from .model import route_all
    from .runtime.fsep import token_splits
    from .planner import plan_generation
    from .train import Trainer
    rc, ds = _load_run(args)
    tr = Trainer(rc, ds)
    inp = tr.step_inputs(tr.global_batches(0)[0])
    routing = route_all(tr.params(), tr.cfg)
    splits = {}
    for layer in tr.cfg.moe_layers:
        tot = np.zeros((rc.fs, tr.cfg.n_experts), dtype=np.int64)
        for gs in inp.batches:
            tot += token_splits(layer, gs.inputs, rc.fs, routing[layer], tr.cfg.n_experts)
        splits[layer] = tot
    sys.stdout.write(plan_generation(splits, rc.fs).serialize())
    return EXIT_OK


def _emit(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=1)
    print(text)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import DatasetError
    from .graph import GeometryError
    from .train import NumericError
    args = build_parser().parse_args(argv)
    cmd = {"gen": cmd_gen, "train": cmd_train, "bench": cmd_bench,
           "verify": cmd_verify, "plan": cmd_plan}[args.command]
    try:
        return cmd(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, GeometryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
