"""Concentration diagnostics and pass@K estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .algorithms import gate_tokens
from .core_math import PROB_FLOOR


@dataclass
class LambdaReport:
    lambda_sampled: float
    lambda_rank: list[float]
    geo_sampled: float
    geo_rank: list[float]
    # double-averaged arithmetic probability, for plots on a linear scale
    mean_prob_rank: list[float]
    token_count: int

    def as_dict(self) -> dict:
        return {
            "lambda_sampled": self.lambda_sampled,
            "lambda_rank": self.lambda_rank,
            "geo_sampled": self.geo_sampled,
            "geo_rank": self.geo_rank,
            "mean_prob_rank": self.mean_prob_rank,
            "token_count": self.token_count,
        }


@dataclass
class EntropyHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    gated_fraction: float
    token_count: int


def lambda_report(rollouts, k_max: int = 3) -> LambdaReport:
    """Average log-probability of the sampled and rank-k tokens.

    Averages within each response first, then across responses, using the
    top-K snapshot recorded when each token was emitted.
    """
    rollouts = [ro for ro in rollouts if len(ro)]
    if not rollouts:
        raise ValueError("no tokens to report on")
    per_resp_logk = np.empty((len(rollouts), k_max))
    per_resp_pk = np.empty((len(rollouts), k_max))
    per_resp_samp = np.empty(len(rollouts))
    n_tok = 0
    for i, ro in enumerate(rollouts):
        probs = []
        for rec in ro.records:
            if len(rec.topk) < k_max:
                raise ValueError(f"recorded top-K depth {len(rec.topk)} is below k_max={k_max}")
            probs.append(rec.topk.probs[:k_max])
        p = np.maximum(np.array(probs), PROB_FLOOR)
        per_resp_logk[i] = np.log(p).mean(axis=0)
        per_resp_pk[i] = p.mean(axis=0)
        per_resp_samp[i] = np.mean([max(rec.behavior_logprob, math.log(PROB_FLOOR)) for rec in ro.records])
        n_tok += len(ro)
    lam_k = per_resp_logk.mean(axis=0)
    lam = float(per_resp_samp.mean())
    return LambdaReport(
        lambda_sampled=lam,
        lambda_rank=[float(v) for v in lam_k],
        geo_sampled=math.exp(lam),
        geo_rank=[float(math.exp(v)) for v in lam_k],
        mean_prob_rank=[float(v) for v in per_resp_pk.mean(axis=0)],
        token_count=n_tok,
    )


def pass_at_k_unbiased(n: int, c: int, k: int) -> float:
    """``1 - C(n-c, k) / C(n, k)``.

    The ratio is the product of ``1 - k/i`` over ``i`` in ``(n-c, n]``,
    accumulated as a sum of ``log1p`` terms.
    """
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    if c == 0:
        return 0.0
    i = np.arange(n - c + 1, n + 1, dtype=np.float64)
    return float(-math.expm1(math.fsum(np.log1p(-k / i))))


def pass_at_k_curve(counts, k_list) -> list[float]:
    """Mean unbiased pass@K over prompts. ``counts`` holds ``(n, c)`` pairs."""
    counts = [(int(n), int(c)) for n, c in counts]
    if not counts:
        raise ValueError("no prompts")
    n_min = min(n for n, _ in counts)
    for k in k_list:
        if k > n_min:
            raise ValueError(f"K={k} exceeds the smallest sample count {n_min}")
    return [float(np.mean([pass_at_k_unbiased(n, c, k) for n, c in counts])) for k in k_list]


def default_bin_edges(vocab_size: int, n_bins: int = 50) -> np.ndarray:
    return np.linspace(0.0, math.log(vocab_size), n_bins + 1)


def entropy_histogram(entropies, bin_edges, q: float = 0.8) -> EntropyHistogram:
    h = np.asarray(entropies, dtype=np.float64)
    edges = np.asarray(bin_edges, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty batch")
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    counts, _ = np.histogram(np.clip(h, edges[0], edges[-1]), bins=edges)
    return EntropyHistogram(edges, counts, gate_tokens(h, q).gated_fraction, int(h.size))
