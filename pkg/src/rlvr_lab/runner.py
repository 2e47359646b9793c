"""Experiment orchestration: config files, seeded training, evaluation, export.

Randomness is drawn from independent substreams keyed by
``(seed, purpose, step, batch slot, rollout index)``, so a run is fully
determined by its config and can resume from any checkpoint without storing
generator internals.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import itertools
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracles
from .algorithms import (AlgorithmConfig, GateMask, assemble_update, batch_entropies, gate_tokens,
                         make_group)
from .env import TaskSpec, make_task
from .metrics import default_bin_edges, entropy_histogram, lambda_report, pass_at_k_curve
from .policy import (DEFAULT_K_RECORD, DecodingState, TabularPolicy, load_checkpoint, rollout,
                     save_checkpoint)

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1

TASK_KEYS = {
    "SumGrammar": {"family", "targets"},
    "BranchChain": {"family", "depth", "branching", "n_correct", "seed", "n_prompts"},
}


@dataclass
class ScheduleConfig:
    total_steps: int = 500
    prompts_per_batch: int = 8
    eval_every: int = 50
    eval_n_samples: int = 128
    eval_K_list: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)
    seed: int | None = None
    lambda_k_max: int = 3
    k_record: int = DEFAULT_K_RECORD
    hist_bins: int = 50


@dataclass
class IOConfig:
    output_dir: str = "runs/default"
    checkpoint_every: int = 50
    record_wall_time: bool = False


@dataclass
class ExperimentConfig:
    task: dict
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def build_task(self) -> TaskSpec:
        params = {k: v for k, v in self.task.items() if k != "family"}
        return make_task(self.task["family"], **params)

    def validate(self) -> "ExperimentConfig":
        fam = self.task.get("family")
        if fam not in TASK_KEYS:
            raise ValueError(f"unknown task family {fam!r}")
        extra = set(self.task) - TASK_KEYS[fam]
        if extra:
            raise ValueError(f"unknown task keys for {fam}: {sorted(extra)}")
        task = self.build_task()
        self.algorithm.validate(task.vocab_size)
        s = self.schedule
        if s.seed is None:
            raise ValueError("schedule.seed is required")
        if s.total_steps < 1 or s.prompts_per_batch < 1 or s.eval_every < 1:
            raise ValueError("total_steps, prompts_per_batch and eval_every must be >= 1")
        if any(not 1 <= k <= s.eval_n_samples for k in s.eval_K_list):
            raise ValueError("every eval K must lie in [1, eval_n_samples]")
        if not 1 <= s.lambda_k_max <= min(s.k_record, task.vocab_size):
            raise ValueError("lambda_k_max must not exceed the recorded top-K depth")
        if s.prompts_per_batch % self.algorithm.num_minibatches:
            raise ValueError("prompts_per_batch must be divisible by num_minibatches")
        if self.io.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "task": dict(self.task),
            "algorithm": dataclasses.asdict(self.algorithm),
            "schedule": dataclasses.asdict(self.schedule),
            "io": dataclasses.asdict(self.io),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sched = dict(d.get("schedule", {}))
        if "eval_K_list" in sched:
            sched["eval_K_list"] = tuple(sched["eval_K_list"])
        return cls(
            task=dict(d["task"]),
            algorithm=AlgorithmConfig(**d.get("algorithm", {})),
            schedule=ScheduleConfig(**sched),
            io=IOConfig(**d.get("io", {})),
        )


# -- config file ---------------------------------------------------------------


def _coerce(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    if isinstance(default, int) or default is None:
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _fill(cls, section: dict, block: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(section) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in [{block}]: {sorted(unknown)}")
    kwargs = {}
    for k, raw in section.items():
        f = known[k]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[k] = _coerce(raw, default, f"{block}.{k}")
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    blocks = set(cp.sections())
    unknown = blocks - {"task", "algorithm", "schedule", "io"}
    if unknown:
        raise ValueError(f"unknown config blocks: {sorted(unknown)}")
    if "task" not in blocks:
        raise ValueError("config needs a [task] block")
    task: dict = {}
    for k, v in cp["task"].items():
        if k == "family":
            task[k] = v.strip()
        elif k == "targets":
            task[k] = [int(x) for x in v.replace(" ", "").split(",") if x]
        else:
            task[k] = int(v)
    cfg = ExperimentConfig(
        task=task,
        algorithm=_fill(AlgorithmConfig, dict(cp["algorithm"]) if "algorithm" in blocks else {}, "algorithm"),
        schedule=_fill(ScheduleConfig, dict(cp["schedule"]) if "schedule" in blocks else {}, "schedule"),
        io=_fill(IOConfig, dict(cp["io"]) if "io" in blocks else {}, "io"),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for block, values in cfg.to_dict().items():
        lines.append(f"[{block}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                continue
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


# -- sampling helpers ------------------------------------------------------------


def substream(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def batch_prompts(task: TaskSpec, step: int, per_batch: int) -> list[int]:
    P = len(task.prompts)
    return [task.prompts[((step - 1) * per_batch + j) % P] for j in range(per_batch)]


def sample_groups(behavior, task: TaskSpec, cfg: ExperimentConfig, step: int):
    a, s = cfg.algorithm, cfg.schedule
    groups = []
    for j, pid in enumerate(batch_prompts(task, step, s.prompts_per_batch)):
        ros = [rollout(behavior, task, pid, a.temperature, substream(s.seed, TRAIN_STREAM, step, j, i), s.k_record)
               for i in range(a.group_size_G)]
        groups.append(make_group(pid, ros, a.adv_std_eps))
    return groups


def effective_config(alg: AlgorithmConfig, step: int) -> AlgorithmConfig:
    if alg.variant == "SimKO" and step <= alg.simko_warmup_steps:
        return dataclasses.replace(alg, variant="GRPO")
    return alg


# -- evaluation --------------------------------------------------------------------


def evaluate(policy, task: TaskSpec, n: int, k_list, seed: int, temperature: float = 1.0,
             step: int = 0, k_max: int = 3, k_record: int = DEFAULT_K_RECORD) -> dict:
    """Sample ``n`` fresh responses per prompt and report pass@K and rank diagnostics.

    Sampling goes through a snapshot; the policy itself is never touched.
    """
    if policy.vocab_size != task.vocab_size:
        raise ValueError(f"checkpoint vocabulary {policy.vocab_size} does not match task vocabulary {task.vocab_size}")
    k_list = [int(k) for k in k_list]
    if any(not 1 <= k <= n for k in k_list):
        raise ValueError("every K must lie in [1, n]")
    frozen = policy.snapshot("behavior") if isinstance(policy, TabularPolicy) else policy
    counts, all_ros = [], []
    for pid in task.prompts:
        ros = [rollout(frozen, task, pid, temperature, substream(seed, EVAL_STREAM, step, pid, i), k_record)
               for i in range(n)]
        counts.append((n, sum(ro.reward for ro in ros)))
        all_ros.extend(ros)
    curve = pass_at_k_curve(counts, k_list)
    return {
        "pass_at_k": {str(k): v for k, v in zip(k_list, curve)},
        "counts": [c for _, c in counts],
        "lambda": lambda_report(all_ros, min(k_max, k_record, task.vocab_size)).as_dict(),
    }


# -- training ---------------------------------------------------------------------------


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.io.output_dir) / "checkpoints"


def latest_checkpoint(out_dir) -> Path | None:
    ckdir = Path(out_dir) / "checkpoints"
    files = sorted(ckdir.glob("step_*.json"))
    return files[-1] if files else None


def _truncate_metrics(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        try:
            if json.loads(line)["step"] <= last_step:
                keep.append(line)
        except (ValueError, KeyError):
            continue
    path.write_text("".join(l + "\n" for l in keep))


def _train_row(step, cfg, eff, groups, reports, gate, task, t0) -> dict:
    rewards = np.array([ro.reward for g in groups for ro in g.rollouts], dtype=float)
    adv = np.concatenate([g.advantages for g in groups])
    ents = batch_entropies(groups)
    ros = [ro for g in groups for ro in g.rollouts]
    lam = lambda_report(ros, cfg.schedule.lambda_k_max)
    hist = entropy_histogram(ents, default_bin_edges(task.vocab_size, cfg.schedule.hist_bins),
                             cfg.algorithm.gate_quantile_q)
    counts = {k: sum(r.counts[k] for r in reports) for k in reports[0].counts}
    gnorm = math.sqrt(sum(float(np.dot(v, v)) for r in reports for v in r.grads.values()))
    return {
        "step": step,
        "variant": eff.variant,
        "mean_reward": float(rewards.mean()),
        "adv_mean": float(adv.mean()),
        "adv_std": float(adv.std()),
        "adv_min": float(adv.min()),
        "adv_max": float(adv.max()),
        "gated_fraction": gate.gated_fraction,
        "gate_tau": gate.threshold_tau if math.isfinite(gate.threshold_tau) else None,
        "clip_fraction": counts["clipped"] / max(counts["tokens"], 1),
        "surrogate": float(sum(r.surrogate_value for r in reports)),
        "grad_norm": gnorm,
        "token_counts": counts,
        "lambda_sampled": lam.lambda_sampled,
        "lambda_rank": lam.lambda_rank,
        "geo_rank": lam.geo_rank,
        "mean_prob_rank": lam.mean_prob_rank,
        "entropy_mean": float(ents.mean()),
        "entropy_hist_range": [0.0, math.log(task.vocab_size)],
        "entropy_hist": hist.counts.tolist(),
        "eval": None,
        "wall_time": round(time.perf_counter() - t0, 6) if cfg.io.record_wall_time else None,
    }


def _eval_block(policy, task, cfg, step) -> dict:
    s = cfg.schedule
    return evaluate(policy, task, s.eval_n_samples, s.eval_K_list, s.seed, cfg.algorithm.temperature,
                    step=step, k_max=s.lambda_k_max, k_record=s.k_record)


def train(cfg: ExperimentConfig, resume: bool = False, stop_after: int | None = None) -> TabularPolicy:
    """Run the training loop, appending one JSON row per step to ``metrics.jsonl``.

    ``stop_after`` ends the loop early (used to simulate an interrupted run).
    """
    cfg.validate()
    task = cfg.build_task()
    out = Path(cfg.io.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _checkpoint_dir(cfg).mkdir(exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    (out / "config.ini").write_text(render_config(cfg))
    t0 = time.perf_counter()

    start = 1
    reference = None
    ck = latest_checkpoint(out) if resume else None
    if ck is not None:
        policy, meta = load_checkpoint(ck)
        if policy.vocab_size != task.vocab_size:
            raise ValueError("checkpoint vocabulary does not match the task")
        start = int(meta["rng"]["next_step"])
        if meta.get("reference") is not None:
            reference = TabularPolicy.from_dict(meta["reference"]).snapshot("reference")
        _truncate_metrics(metrics_path, start - 1)
        log.info("resuming from %s at step %d", ck, start)
    else:
        policy = TabularPolicy(task.vocab_size)
        if cfg.algorithm.kl_beta > 0:
            reference = policy.snapshot("reference")
        metrics_path.write_text("")
        row = {"step": 0, "variant": cfg.algorithm.variant, "eval": _eval_block(policy, task, cfg, 0)}
        _append(metrics_path, row)

    end = cfg.schedule.total_steps if stop_after is None else min(stop_after, cfg.schedule.total_steps)
    for step in range(start, end + 1):
        eff = effective_config(cfg.algorithm, step)
        behavior = policy.snapshot("behavior")
        groups = sample_groups(behavior, task, cfg, step)
        q = eff.gate_quantile_q if eff.variant == "SimKO" else 1.0
        gate = gate_tokens(batch_entropies(groups), q)
        reports = []
        nmb = eff.num_minibatches
        size = len(groups) // nmb
        offset = 0
        try:
            for m in range(nmb):
                chunk = groups[m * size:(m + 1) * size]
                ntok = batch_entropies(chunk).size
                sub = GateMask(gate.threshold_tau, gate.gated[offset:offset + ntok])
                offset += ntok
                rep = assemble_update(chunk, policy, behavior, reference, eff, gate=sub)
                policy.apply_gradient(rep.grads, eff.lr)
                reports.append(rep)
        except FloatingPointError as exc:
            _append(metrics_path, {"step": step, "variant": eff.variant, "error": str(exc)})
            raise
        row = _train_row(step, cfg, eff, groups, reports, gate, task, t0)
        if step % cfg.schedule.eval_every == 0 or step == cfg.schedule.total_steps:
            row["eval"] = _eval_block(policy, task, cfg, step)
        _append(metrics_path, row)
        if step % cfg.io.checkpoint_every == 0 or step == cfg.schedule.total_steps:
            save_checkpoint(
                _checkpoint_dir(cfg) / f"step_{step:06d}.json", policy,
                step=step, config=cfg.to_dict(),
                rng={"seed": cfg.schedule.seed, "next_step": step + 1},
                reference=None if reference is None else reference.to_dict(),
            )
    return policy


def _append(path: Path, row: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(row) + "\n")


def read_metrics(path) -> tuple[list[dict], int]:
    rows, bad = [], 0
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if not isinstance(row, dict) or not isinstance(row.get("step"), int):
                raise ValueError
            rows.append(row)
        except ValueError:
            bad += 1
    return rows, bad


# -- plot export ---------------------------------------------------------------------------


def export_plot_data(metrics_path, which: str, out_dir) -> Path:
    """Write a tidy CSV (one row per step and series) for ``lambda``, ``passk`` or ``entropy``."""
    if which not in ("lambda", "passk", "entropy"):
        raise ValueError(f"unknown export kind {which!r}")
    rows, bad = read_metrics(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{which}.csv"
    skipped = bad
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if which == "lambda":
            w.writerow(["step", "variant", "series", "log_mean", "geo_mean", "mean_prob"])
        elif which == "passk":
            w.writerow(["step", "variant", "series", "value"])
        else:
            w.writerow(["step", "variant", "series", "bin_lo", "bin_hi", "count"])
        for row in rows:
            try:
                _export_row(w, row, which)
            except (KeyError, TypeError, ValueError, IndexError):
                skipped += 1
    if skipped:
        print(f"skipped {skipped} malformed metrics rows", file=sys.stderr)
    return path


def _export_row(w, row: dict, which: str) -> None:
    step, variant = row["step"], row["variant"]
    if which == "lambda":
        out = []
        if "lambda_rank" in row:
            ls = float(row["lambda_sampled"])
            out.append([step, variant, "sampled", ls, math.exp(ls), ""])
            for k, (lk, pk) in enumerate(zip(row["lambda_rank"], row["mean_prob_rank"]), 1):
                out.append([step, variant, f"rank{k}", lk, math.exp(lk), pk])
        ev = row.get("eval")
        if ev:
            lam = ev["lambda"]
            out.append([step, variant, "eval_sampled", lam["lambda_sampled"], lam["geo_sampled"], ""])
            for k, (lk, pk) in enumerate(zip(lam["lambda_rank"], lam["mean_prob_rank"]), 1):
                out.append([step, variant, f"eval_rank{k}", lk, math.exp(lk), pk])
        w.writerows(out)
    elif which == "passk":
        ev = row.get("eval")
        if ev:
            w.writerows([[step, variant, f"pass@{k}", float(v)] for k, v in ev["pass_at_k"].items()])
    else:
        if "entropy_hist" in row:
            lo, hi = row["entropy_hist_range"]
            counts = row["entropy_hist"]
            edges = np.linspace(lo, hi, len(counts) + 1)
            w.writerows([[step, variant, f"bin{i}", edges[i], edges[i + 1], int(c)]
                         for i, c in enumerate(counts)])


# -- gradient check -------------------------------------------------------------------------

GRADCHECK_TOL = 1e-4


def _random_instance(rng: np.random.Generator, cfg: AlgorithmConfig):
    V = int(rng.integers(5, 8))
    L = int(rng.integers(1, 4))
    task = make_task("BranchChain", depth=L, branching=V, n_correct=1, seed=int(rng.integers(1 << 30)),
                     n_prompts=2)
    current = TabularPolicy(V)
    behavior_src = TabularPolicy(V)
    reference = TabularPolicy(V)
    for pid in task.prompts:
        for length in range(L):
            for prefix in _prefixes(V, length, 12, rng):
                s = DecodingState(pid, prefix)
                z = rng.normal(0.0, 1.0, V)
                behavior_src.set_logits(s, z)
                current.set_logits(s, z + rng.normal(0.0, 0.15, V))
                reference.set_logits(s, rng.normal(0.0, 0.5, V))
    behavior = behavior_src.snapshot("behavior")
    groups = []
    for pid in task.prompts:
        ros = [rollout(behavior, task, pid, cfg.temperature, rng) for _ in range(cfg.group_size_G)]
        rewards = rng.integers(0, 2, len(ros))
        rewards[0], rewards[1] = 1, 0
        ros = [dataclasses.replace(ro, reward=int(r)) for ro, r in zip(ros, rewards)]
        groups.append(make_group(pid, ros, cfg.adv_std_eps))
    return current, behavior, reference.snapshot("reference"), groups


def _prefixes(V: int, length: int, limit: int, rng) -> list:
    if V**length <= limit:
        return list(itertools.product(range(V), repeat=length))
    return [tuple(int(t) for t in rng.integers(0, V, length)) for _ in range(limit)]


def gradcheck_configs() -> list[AlgorithmConfig]:
    """Variant grid: plain GRPO/PSR/NSR plus every SimKO (alpha, lambda, K) combination."""
    base = dict(group_size_G=4, kl_beta=0.0)
    cfgs = [AlgorithmConfig(variant=v, **base) for v in ("GRPO", "PSR", "NSR")]
    for a in (0.0, 0.01, 0.3):
        for lam in (1.0, 1.1, 2.0):
            for k in (1, 3, 5):
                cfgs.append(AlgorithmConfig(variant="SimKO", alpha=a, lambda_top1=lam, smoothing_K=k,
                                            gate_quantile_q=0.5, **base))
    return cfgs


def gradcheck_instance(cfg: AlgorithmConfig, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error of the analytic update against central differences on one random instance."""
    for _ in range(20):
        current, behavior, ref, groups = _random_instance(rng, cfg)
        gate = gate_tokens(batch_entropies(groups), cfg.gate_quantile_q if cfg.variant == "SimKO" else 1.0)
        frozen = oracles.freeze_batch(groups, current, behavior, cfg, gate)
        if oracles.clip_margin(frozen, current, behavior, cfg) > 1e-3:
            break
    rep = assemble_update(groups, current, behavior, ref, cfg, gate=gate)
    fd = oracles.surrogate_fd_grads(frozen, current, behavior, ref, cfg, h)
    scale = max([np.abs(g).max() for g in fd.values()] + [1e-8])
    err = 0.0
    for state, g in fd.items():
        a = rep.grads.get(state, np.zeros_like(g))
        err = max(err, float(np.abs(a - g).max()) / scale)
    for state in rep.grads:
        if state not in fd:
            err = max(err, float(np.abs(rep.grads[state]).max()) / scale)
    return err


def gradcheck(trials: int = 100, seed: int = 0, with_kl: bool = True) -> dict:
    """Finite-difference check of ``assemble_update`` across all variants.

    Returns the max relative error per variant label and overall. SimKO
    trials cycle through the full (alpha, lambda, K) grid.
    """
    cfgs = gradcheck_configs()
    simko = [c for c in cfgs if c.variant == "SimKO"]
    results: dict = {}
    rng = np.random.default_rng(seed)
    for c in cfgs[:3]:
        errs = []
        for t in range(trials):
            cc = dataclasses.replace(c, kl_beta=0.05 if with_kl and t % 4 == 3 else 0.0)
            errs.append(gradcheck_instance(cc, rng))
        results[c.variant] = max(errs)
    errs = {}
    for t in range(max(trials, len(simko))):
        c = simko[t % len(simko)]
        cc = dataclasses.replace(c, kl_beta=0.05 if with_kl and t % 4 == 3 else 0.0)
        label = f"SimKO(alpha={c.alpha},lambda={c.lambda_top1},K={c.smoothing_K})"
        errs[label] = max(errs.get(label, 0.0), gradcheck_instance(cc, rng))
    results.update(errs)
    results["max"] = max(results.values())
    results["passed"] = results["max"] <= GRADCHECK_TOL
    return results
