"""Canonical forking-path experiment shared by the scripts and the acceptance suite.

The task is BranchChain with depth 4, branching 8 and 6 correct paths per
prompt. Algorithm hyperparameters stay at their defaults except the learning
rate. At the default ``lr = 0.1`` a uniform start (success rate 6/4096) learns
nothing in 500 steps, so the tabular runs use ``lr = 5``.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .algorithms import AlgorithmConfig
from .runner import ExperimentConfig, IOConfig, ScheduleConfig, train

TASK = dict(family="BranchChain", depth=4, branching=8, n_correct=6, seed=0, n_prompts=8)
EXPERIMENT_LR = 5.0
SEEDS = (0, 1, 2, 3, 4)


def branchchain_config(variant: str, seed: int, output_dir, total_steps: int = 500, eval_every: int = 100,
                       **algorithm) -> ExperimentConfig:
    alg = AlgorithmConfig(variant=variant, lr=EXPERIMENT_LR)
    alg = dataclasses.replace(alg, **algorithm)
    return ExperimentConfig(
        task=dict(TASK),
        algorithm=alg,
        schedule=ScheduleConfig(total_steps=total_steps, prompts_per_batch=8, eval_every=eval_every,
                                eval_n_samples=128, seed=seed),
        io=IOConfig(output_dir=str(output_dir), checkpoint_every=max(total_steps // 5, 1)),
    ).validate()


def final_eval(output_dir) -> dict:
    """Evaluation block of the last row carrying one, plus the step-0 block."""
    rows = [json.loads(l) for l in (Path(output_dir) / "metrics.jsonl").read_text().splitlines()]
    evals = [r for r in rows if r.get("eval")]
    return {"initial": evals[0]["eval"], "final": evals[-1]["eval"], "step": evals[-1]["step"]}


def run_variants(variants, seeds, root, **kwargs) -> dict:
    """Train every (variant, seed) pair under ``root``; return ``{(variant, seed): final_eval}``."""
    out = {}
    for v in variants:
        for s in seeds:
            d = Path(root) / f"{v}_seed{s}"
            train(branchchain_config(v, s, d, **kwargs))
            out[(v, s)] = final_eval(d)
    return out
