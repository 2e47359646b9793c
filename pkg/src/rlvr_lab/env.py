"""Synthetic token tasks with a binary, programmatic verifier.

Two families are built in:

* ``SumGrammar``: answer ``a + b <end>`` for a target digit ``t``. Every
  ordered digit pair with ``a + b = t`` is correct, so target ``t`` has
  ``t + 1`` valid completions.
* ``BranchChain``: fixed-length sequences over ``V`` tokens of which ``M``
  randomly placed paths are correct. Path multiplicity and depth are
  independent knobs; there is no terminal token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUM_PLUS = 10
SUM_END = 11
SUM_MARKER = 12
SUM_VOCAB = 13


@dataclass(frozen=True)
class TaskSpec:
    name: str
    vocab_size: int
    prompts: tuple[int, ...]
    max_response_length: int
    terminal_token: int | None
    correct: dict = field(repr=False, compare=False)
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.terminal_token is not None and not 0 <= self.terminal_token < self.vocab_size:
            raise ValueError("terminal token outside the vocabulary")
        for p in self.prompts:
            if not self.correct.get(p):
                raise ValueError(f"prompt {p} has no correct completion")
            if any(len(s) > self.max_response_length for s in self.correct[p]):
                raise ValueError(f"prompt {p} has a correct completion longer than the limit")


@dataclass(frozen=True)
class Verdict:
    reward: int


def _sum_grammar(targets) -> TaskSpec:
    targets = sorted({int(t) for t in targets})
    if not targets:
        raise ValueError("SumGrammar needs at least one target")
    if any(not 0 <= t <= 9 for t in targets):
        raise ValueError("SumGrammar targets must lie in 0..9")
    correct = {
        t: frozenset((a, SUM_PLUS, t - a, SUM_END) for a in range(t + 1))
        for t in targets
    }
    return TaskSpec(
        name="SumGrammar",
        vocab_size=SUM_VOCAB,
        prompts=tuple(targets),
        max_response_length=4,
        terminal_token=SUM_END,
        correct=correct,
        params={"targets": targets},
    )


def _decode(code: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        code, d = divmod(code, base)
        out.append(d)
    return tuple(reversed(out))


def _branch_chain(depth: int, branching: int, n_correct: int, seed: int, n_prompts: int = 1) -> TaskSpec:
    if depth < 1 or branching < 2 or n_prompts < 1:
        raise ValueError("BranchChain needs depth >= 1, branching >= 2, n_prompts >= 1")
    total = branching**depth
    if not 1 <= n_correct <= total:
        raise ValueError(f"number of correct paths must lie in [1, {total}], got {n_correct}")
    correct = {}
    for p in range(n_prompts):
        rng = np.random.default_rng([seed, p])
        codes = rng.choice(total, size=n_correct, replace=False)
        correct[p] = frozenset(_decode(int(c), branching, depth) for c in codes)
    return TaskSpec(
        name="BranchChain",
        vocab_size=branching,
        prompts=tuple(range(n_prompts)),
        max_response_length=depth,
        terminal_token=None,
        correct=correct,
        params={"depth": depth, "branching": branching, "n_correct": n_correct,
                "seed": seed, "n_prompts": n_prompts},
    )


def make_task(family: str, **params) -> TaskSpec:
    if family == "SumGrammar":
        return _sum_grammar(params.get("targets", ()))
    if family == "BranchChain":
        return _branch_chain(
            depth=int(params["depth"]),
            branching=int(params["branching"]),
            n_correct=int(params["n_correct"]),
            seed=int(params.get("seed", 0)),
            n_prompts=int(params.get("n_prompts", 1)),
        )
    raise ValueError(f"unknown task family {family!r}")


def verify(task: TaskSpec, prompt_id: int, tokens) -> Verdict:
    if prompt_id not in task.correct:
        raise ValueError(f"unknown prompt id {prompt_id} for {task.name}")
    seq = tuple(int(t) for t in tokens)
    if any(not 0 <= t < task.vocab_size for t in seq):
        raise ValueError("token outside the vocabulary")
    return Verdict(int(seq in task.correct[prompt_id]))


def enumerate_correct(task: TaskSpec, prompt_id: int) -> frozenset:
    if prompt_id not in task.correct:
        raise ValueError(f"unknown prompt id {prompt_id} for {task.name}")
    return task.correct[prompt_id]
