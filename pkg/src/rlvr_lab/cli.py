"""Command-line entry point: ``rlvr-lab {train,evaluate,gradcheck,export,validate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner
from .policy import load_checkpoint


def _cmd_train(args) -> int:
    cfg = runner.load_config(args.config)
    runner.train(cfg, resume=args.resume)
    print(f"metrics written to {cfg.io.output_dir}/metrics.jsonl")
    return 0


def _cmd_evaluate(args) -> int:
    policy, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = runner.load_config(args.config)
    elif "config" in meta:
        cfg = runner.ExperimentConfig.from_dict(meta["config"])
    else:
        raise ValueError("checkpoint carries no config; pass --config")
    task = cfg.build_task()
    res = runner.evaluate(policy, task, args.n, args.k, args.seed, cfg.algorithm.temperature,
                          step=int(meta.get("step", 0)), k_max=cfg.schedule.lambda_k_max,
                          k_record=cfg.schedule.k_record)
    json.dump(res, sys.stdout, indent=2)
    print()
    return 0


def _cmd_gradcheck(args) -> int:
    res = runner.gradcheck(args.trials, args.seed)
    for label, err in res.items():
        if label not in ("max", "passed"):
            print(f"{label:45s} {err:.3e}")
    print(f"max relative error {res['max']:.3e} (tolerance {runner.GRADCHECK_TOL:g}): "
          f"{'PASS' if res['passed'] else 'FAIL'}")
    return 0 if res["passed"] else 1


def _cmd_export(args) -> int:
    path = runner.export_plot_data(args.metrics, args.kind, args.out)
    print(path)
    return 0


def _cmd_validate(args) -> int:
    cfg = runner.load_config(args.config)
    task = cfg.build_task()
    print(f"ok: {task.name} with V={task.vocab_size}, {len(task.prompts)} prompts, "
          f"variant {cfg.algorithm.variant}, {cfg.schedule.total_steps} steps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlvr-lab", description="Tabular group-relative policy-gradient experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="pass@K and rank diagnostics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, default=128, help="samples per prompt")
    e.add_argument("--k", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64, 128])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", help="override the config stored in the checkpoint")
    e.set_defaults(func=_cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of all update rules")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    x = sub.add_parser("export", help="write tidy CSV plot data from a metrics file")
    x.add_argument("--metrics", required=True)
    x.add_argument("--kind", choices=("lambda", "passk", "entropy"), required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export)

    v = sub.add_parser("validate", help="parse and check a config without running it")
    v.add_argument("--config", required=True)
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
