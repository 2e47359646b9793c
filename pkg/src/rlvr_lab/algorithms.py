"""Group-relative policy-gradient updates: GRPO, PSR, NSR and SimKO.

All gradients are taken directly in logit space. For a state with logits
``z`` and sampling temperature ``T`` the policy is ``softmax(z / T)`` and

    d/dz log pi(y) = (e_y - pi) / T.

``assemble_update`` returns the *ascent* direction of the clipped surrogate,
so ``policy.apply_gradient(report.grads, lr)`` increases the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import core_math
from .policy import DecodingState, Rollout

VARIANTS = ("GRPO", "PSR", "NSR", "SimKO")


@dataclass
class AlgorithmConfig:
    variant: str = "SimKO"
    alpha: float = 0.01
    smoothing_K: int = 3
    lambda_top1: float = 1.1
    gate_quantile_q: float = 0.8
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    group_size_G: int = 8
    temperature: float = 1.0
    lr: float = 0.1
    adv_std_eps: float = 1e-6
    num_minibatches: int = 1
    simko_warmup_steps: int = 0

    def validate(self, vocab_size: int | None = None) -> "AlgorithmConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.smoothing_K < 1 or (vocab_size is not None and self.smoothing_K > vocab_size):
            raise ValueError("smoothing_K must lie in [1, vocab_size]")
        if not self.lambda_top1 >= 1.0:
            raise ValueError("lambda_top1 must be >= 1")
        if not 0.0 <= self.gate_quantile_q <= 1.0:
            raise ValueError("gate_quantile_q must lie in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.group_size_G < 2:
            raise ValueError("group_size_G must be at least 2")
        if not self.temperature > 0 or not self.lr > 0 or not self.adv_std_eps >= 0:
            raise ValueError("temperature and lr must be positive, adv_std_eps non-negative")
        if self.num_minibatches < 1 or self.simko_warmup_steps < 0:
            raise ValueError("num_minibatches >= 1 and simko_warmup_steps >= 0 required")
        return self

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class RolloutGroup:
    prompt_id: int
    rollouts: list[Rollout]
    advantages: np.ndarray


@dataclass
class GateMask:
    threshold_tau: float
    gated: np.ndarray

    @property
    def gated_fraction(self) -> float:
        return float(self.gated.mean()) if self.gated.size else 0.0


@dataclass
class UpdateReport:
    surrogate_value: float
    grads: dict
    counts: dict = field(default_factory=dict)


def compute_advantages(rewards, adv_std_eps: float = 1e-6) -> np.ndarray:
    """``(r - mean) / (population std + eps)``; constant groups give exact zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two responses")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + adv_std_eps)


def make_group(prompt_id: int, rollouts, adv_std_eps: float = 1e-6) -> RolloutGroup:
    rollouts = list(rollouts)
    adv = compute_advantages([ro.reward for ro in rollouts], adv_std_eps)
    return RolloutGroup(prompt_id, rollouts, adv)


def batch_entropies(batch) -> np.ndarray:
    return np.array([rec.entropy_at_emit for g in batch for ro in g.rollouts for rec in ro.records])


def gate_tokens(entropies, q: float) -> GateMask:
    """Gate tokens whose entropy exceeds the empirical q-quantile of the batch."""
    h = np.asarray(entropies, dtype=np.float64)
    if h.size == 0:
        raise ValueError("cannot gate an empty batch")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if q == 0.0:
        tau = -math.inf
    elif q == 1.0:
        tau = math.inf
    else:
        tau = float(np.quantile(h, q, method="linear"))
    return GateMask(tau, h > tau)


def gamma(current, behavior, state: DecodingState, token: int, temperature: float = 1.0) -> float:
    den = behavior.prob(state, token, temperature)
    if den == 0.0:
        return math.inf
    return current.prob(state, token, temperature) / den


def g_term(dist, token: int) -> np.ndarray:
    g = np.array(dist, dtype=np.float64)
    g[token] -= 1.0
    return g


def smoothed_target(dist, token: int, alpha: float, smoothing_K: int) -> np.ndarray:
    p = np.asarray(dist, dtype=np.float64)
    t = np.zeros_like(p)
    t[token] = 1.0 - alpha
    top = core_math.topk(p, smoothing_K).indices
    t[list(top)] += alpha / smoothing_K
    return t


def g_tilde_term(dist, token: int, alpha: float, smoothing_K: int) -> np.ndarray:
    """Top-K label-smoothed G-term ``pi - ((1-a) e_y + a/K sum_topK e_k)``."""
    if alpha == 0.0:
        return g_term(dist, token)
    return np.asarray(dist, dtype=np.float64) - smoothed_target(dist, token, alpha, smoothing_K)


def gamma_pos(current, behavior, state: DecodingState, token: int, alpha: float,
              smoothing_K: int, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Value and descent direction of the smoothed positive ratio.

    The value is assembled literally, with the stop-gradient factor
    ``gamma / gamma_k`` held constant, so it equals ``gamma`` up to rounding.
    The direction is ``sg(gamma) * g_tilde``; its negation divided by the
    temperature is the logit gradient of the value.
    """
    pi = current.distribution(state, temperature)
    g = gamma(current, behavior, state, token, temperature)
    if alpha == 0.0:
        return g, g * g_term(pi, token)
    beh = behavior.distribution(state, temperature)
    top = core_math.topk(pi, smoothing_K).indices
    acc = 0.0
    for k in top:
        gk = float(pi[k] / beh[k]) if beh[k] > 0 else math.inf
        acc += (g / gk) * gk if math.isfinite(gk) and gk > 0 else g
    value = (1.0 - alpha) * g + alpha / smoothing_K * acc
    return value, g * g_tilde_term(pi, token, alpha, smoothing_K)


def gamma_neg(gamma_value: float, rank_of_emitted: int, lambda_top1: float) -> float:
    return lambda_top1 * gamma_value if rank_of_emitted == 1 else gamma_value


def kl_and_grad(pi: np.ndarray, ref: np.ndarray, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Exact ``KL(pi || ref)`` over the vocabulary and its logit gradient."""
    lp = core_math.safe_log(pi)
    lr_ = core_math.safe_log(ref)
    d = lp - lr_
    kl = float(np.dot(pi, d))
    return kl, pi * (d - kl) / temperature


def _clipped(ratio: float, adv: float, eps: float) -> bool:
    """True when the clipped (flat) branch of the PPO min is the active one."""
    if adv > 0:
        return ratio > 1.0 + eps
    if adv < 0:
        return ratio < 1.0 - eps
    return False


def assemble_update(batch, current, behavior, reference=None, config: AlgorithmConfig | None = None,
                    gate: GateMask | None = None) -> UpdateReport:
    """Clipped surrogate value and its logit-space ascent direction.

    Per token the ratio is chosen by sign of advantage and gate: the
    smoothed positive ratio for gated A > 0, the rank-1 amplified ratio for
    gated A < 0, and the plain ratio otherwise (SimKO only). The ratio is
    modified first and clipped second. Each response is weighted by
    ``1 / (G |y|)``; groups are summed.
    """
    cfg = config or AlgorithmConfig()
    T = cfg.temperature
    if gate is None:
        gate = gate_tokens(batch_entropies(batch), cfg.gate_quantile_q if cfg.variant == "SimKO" else 1.0)
    use_kl = cfg.kl_beta > 0 and reference is not None

    grads: dict = {}
    counts = dict(tokens=0, positive=0, negative=0, zero=0, gated=0, gated_positive=0, gated_negative=0,
                  clipped=0, masked=0)
    surrogate = 0.0
    t = 0
    for gi, group in enumerate(batch):
        G = len(group.rollouts)
        for ri, (ro, adv) in enumerate(zip(group.rollouts, group.advantages)):
            adv = float(adv)
            n = len(ro)
            w = 1.0 / (G * n) if n else 0.0
            for l, (state, rec) in enumerate(zip(ro.states(), ro.records)):
                gated = bool(gate.gated[t])
                t += 1
                counts["tokens"] += 1
                counts["gated"] += int(gated)
                if adv > 0:
                    counts["positive"] += 1
                    counts["gated_positive"] += int(gated)
                elif adv < 0:
                    counts["negative"] += 1
                    counts["gated_negative"] += int(gated)
                else:
                    counts["zero"] += 1
                if (cfg.variant == "PSR" and adv < 0) or (cfg.variant == "NSR" and adv > 0):
                    counts["masked"] += 1
                    continue
                y = rec.token
                pi = current.distribution(state, T)
                ratio = gamma(current, behavior, state, y, T)
                if cfg.variant == "SimKO" and gated and adv > 0:
                    ratio, direction = gamma_pos(current, behavior, state, y, cfg.alpha, cfg.smoothing_K, T)
                elif cfg.variant == "SimKO" and gated and adv < 0:
                    ratio = gamma_neg(ratio, current.info(state, T).rank[y], cfg.lambda_top1)
                    direction = ratio * g_term(pi, y)
                else:
                    direction = ratio * g_term(pi, y)

                clipped = _clipped(ratio, adv, cfg.clip_eps)
                counts["clipped"] += int(clipped)
                clip_ratio = min(max(ratio, 1.0 - cfg.clip_eps), 1.0 + cfg.clip_eps)
                value = min(ratio * adv, clip_ratio * adv)
                contrib = None
                if adv != 0.0 and not clipped:
                    contrib = (-adv * w / T) * direction
                if use_kl:
                    kl, kl_grad = kl_and_grad(pi, reference.distribution(state, T), T)
                    value -= cfg.kl_beta * kl
                    kl_part = (-cfg.kl_beta * w) * kl_grad
                    contrib = kl_part if contrib is None else contrib + kl_part
                if not math.isfinite(value) or (contrib is not None and not np.all(np.isfinite(contrib))):
                    raise FloatingPointError(
                        f"non-finite update at prompt {group.prompt_id}, rollout {ri}, token {l}")
                surrogate += w * value
                if contrib is None:
                    continue
                acc = grads.get(state)
                grads[state] = contrib if acc is None else acc + contrib
    if t != gate.gated.size:
        raise ValueError("gate mask does not match the batch")
    return UpdateReport(surrogate, grads, counts)
