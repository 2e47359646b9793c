"""Prefix-keyed tabular softmax policy, snapshots, sampling and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import core_math
from .core_math import TopKSet
from .env import TaskSpec, verify

CHECKPOINT_VERSION = 1
DEFAULT_K_RECORD = 6


class DecodingState(NamedTuple):
    prompt_id: int
    prefix: tuple[int, ...]


@dataclass(frozen=True)
class TokenRecord:
    token: int
    behavior_logprob: float
    entropy_at_emit: float
    topk: TopKSet
    rank_of_emitted: int


@dataclass(frozen=True)
class Rollout:
    prompt_id: int
    tokens: tuple[int, ...]
    records: tuple[TokenRecord, ...]
    reward: int

    def __len__(self) -> int:
        return len(self.tokens)

    def states(self):
        for l in range(len(self.tokens)):
            yield DecodingState(self.prompt_id, self.tokens[:l])


class _StateInfo(NamedTuple):
    probs: np.ndarray
    cdf: np.ndarray
    entropy: float
    order: np.ndarray
    rank: np.ndarray  # rank[token] is 1-based


def _state_info(logits: np.ndarray, temperature: float) -> _StateInfo:
    p = core_math.softmax(logits, temperature)
    order = core_math.stable_order(p)
    rank = np.empty(p.size, dtype=np.int64)
    rank[order] = np.arange(1, p.size + 1)
    return _StateInfo(p, np.cumsum(p), core_math.entropy(p), order, rank)


class _TableBase:
    vocab_size: int
    default_logits: np.ndarray
    table: dict

    def __init__(self):
        self._cache: dict = {}

    def logits(self, state: DecodingState) -> np.ndarray:
        z = self.table.get(state)
        return self.default_logits if z is None else z

    def info(self, state: DecodingState, temperature: float = 1.0) -> _StateInfo:
        key = (state, temperature)
        hit = self._cache.get(key)
        if hit is None:
            hit = _state_info(self.logits(state), temperature)
            self._cache[key] = hit
        return hit

    def distribution(self, state: DecodingState, temperature: float = 1.0) -> np.ndarray:
        return self.info(state, temperature).probs

    def prob(self, state: DecodingState, token: int, temperature: float = 1.0) -> float:
        return float(self.info(state, temperature).probs[token])

    def to_dict(self) -> dict:
        rows = [
            {"prompt": s.prompt_id, "prefix": list(s.prefix), "logits": z.tolist()}
            for s, z in sorted(self.table.items())
        ]
        return {
            "vocab_size": self.vocab_size,
            "default_logits": self.default_logits.tolist(),
            "table": rows,
        }


class TabularPolicy(_TableBase):
    def __init__(self, vocab_size: int, default_logits=None):
        super().__init__()
        self.vocab_size = int(vocab_size)
        if default_logits is None:
            default_logits = np.zeros(self.vocab_size)
        d = np.array(default_logits, dtype=np.float64)
        if d.shape != (self.vocab_size,) or not np.all(np.isfinite(d)):
            raise ValueError("default logits must be a finite vector of length vocab_size")
        self.default_logits = d
        self.table: dict[DecodingState, np.ndarray] = {}

    def set_logits(self, state: DecodingState, logits) -> None:
        z = np.array(logits, dtype=np.float64)
        if z.shape != (self.vocab_size,) or not np.all(np.isfinite(z)):
            raise ValueError(f"bad logits for state {state}")
        self.table[state] = z
        self._cache.clear()

    def apply_gradient(self, grads: dict, lr: float) -> None:
        """Gradient ascent in logit space: ``z += lr * g`` per state."""
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        checked = {}
        for state, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if g.shape != (self.vocab_size,):
                raise ValueError(f"gradient for state {state} has shape {g.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at state {state}")
            checked[state] = g
        for state, g in checked.items():
            z = self.table.get(state)
            if z is None:
                z = self.default_logits.copy()
            self.table[state] = z + lr * g
        if checked:
            self._cache.clear()

    def snapshot(self, role: str = "behavior") -> "PolicySnapshot":
        return PolicySnapshot(self, role)

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPolicy":
        pol = cls(d["vocab_size"], d["default_logits"])
        for row in d["table"]:
            state = DecodingState(int(row["prompt"]), tuple(int(t) for t in row["prefix"]))
            pol.set_logits(state, row["logits"])
        return pol


class PolicySnapshot(_TableBase):
    """Frozen copy of a policy; queries are cached since nothing can change."""

    def __init__(self, source: _TableBase, role: str = "behavior"):
        super().__init__()
        if role not in ("behavior", "reference"):
            raise ValueError(f"unknown snapshot role {role!r}")
        self.role = role
        self.vocab_size = source.vocab_size
        self.default_logits = source.default_logits.copy()
        self.default_logits.flags.writeable = False
        self.table = {}
        for s, z in source.table.items():
            z = z.copy()
            z.flags.writeable = False
            self.table[s] = z


def distribution(policy, state: DecodingState, temperature: float = 1.0) -> np.ndarray:
    return policy.distribution(state, temperature)


def snapshot(policy: TabularPolicy, role: str = "behavior") -> PolicySnapshot:
    return policy.snapshot(role)


def apply_gradient(policy: TabularPolicy, grads: dict, lr: float) -> None:
    policy.apply_gradient(grads, lr)


def sample_token(policy, state: DecodingState, temperature: float, rng: np.random.Generator,
                 k_record: int = DEFAULT_K_RECORD) -> tuple[int, TokenRecord]:
    info = policy.info(state, temperature)
    u = rng.random() * info.cdf[-1]
    tok = min(int(np.searchsorted(info.cdf, u, side="right")), policy.vocab_size - 1)
    k = min(k_record, policy.vocab_size)
    top = info.order[:k]
    rec = TokenRecord(
        token=tok,
        behavior_logprob=math.log(info.probs[tok]),
        entropy_at_emit=info.entropy,
        topk=TopKSet(tuple(int(i) for i in top), tuple(float(info.probs[i]) for i in top)),
        rank_of_emitted=int(info.rank[tok]),
    )
    return tok, rec


def rollout(policy, task: TaskSpec, prompt_id: int, temperature: float, rng: np.random.Generator,
            k_record: int = DEFAULT_K_RECORD) -> Rollout:
    if policy.vocab_size != task.vocab_size:
        raise ValueError("policy and task vocabularies differ")
    tokens: list[int] = []
    records: list[TokenRecord] = []
    while len(tokens) < task.max_response_length:
        tok, rec = sample_token(policy, DecodingState(prompt_id, tuple(tokens)), temperature, rng, k_record)
        tokens.append(tok)
        records.append(rec)
        if tok == task.terminal_token:
            break
    reward = verify(task, prompt_id, tokens).reward
    return Rollout(prompt_id, tuple(tokens), tuple(records), reward)


def save_checkpoint(path, policy: TabularPolicy, **extra) -> None:
    """Write a JSON checkpoint. Float reprs round-trip exactly."""
    payload = {"version": CHECKPOINT_VERSION, "policy": policy.to_dict(), **extra}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TabularPolicy, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    policy = TabularPolicy.from_dict(payload.pop("policy"))
    return policy, payload
