"""Numerical primitives shared across the lab.

Distributions are plain float64 numpy vectors. Logs are natural logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Floor applied before taking logs so rank-k log-probs stay finite.
PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class TopKSet:
    indices: tuple[int, ...]
    probs: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.indices)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not temperature > 0 or not math.isfinite(temperature):
        raise ValueError(f"temperature must be positive and finite, got {temperature}")
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite entries")
    s = z / temperature
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    return z - logsumexp(z)


def logsumexp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    # rounding can push a one-hot to -0.0 or a uniform slightly past ln V
    return min(max(h, 0.0), math.log(p.size))


def stable_order(dist) -> np.ndarray:
    """Token ids by descending probability; ties go to the lower id."""
    p = np.asarray(dist, dtype=np.float64)
    return np.argsort(-p, kind="stable")


def topk(dist, k: int) -> TopKSet:
    p = np.asarray(dist, dtype=np.float64)
    if not 1 <= k <= p.size:
        raise ValueError(f"k must lie in [1, {p.size}], got {k}")
    idx = stable_order(p)[:k]
    return TopKSet(tuple(int(i) for i in idx), tuple(float(p[i]) for i in idx))


def rank_of(dist, token: int) -> int:
    """1-based rank of ``token`` under the stable descending order."""
    p = np.asarray(dist, dtype=np.float64)
    pt = p[token]
    # strictly larger entries, plus equal entries with a lower id
    return int(np.count_nonzero(p > pt) + np.count_nonzero(p[:token] == pt) + 1)


def safe_log(p):
    return np.log(np.maximum(p, PROB_FLOOR))


def log_binomial(n: int, r: int) -> float:
    """ln C(n, r); -inf when r > n."""
    if n < 0 or r < 0:
        raise ValueError("n and r must be non-negative")
    if r > n:
        return -math.inf
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


def check_dist(p, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError("not a valid probability vector")
    return p
