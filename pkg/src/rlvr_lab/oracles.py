"""Brute-force references: finite differences, exhaustive enumeration, exact pass@K.

Nothing here reuses the analytic gradient code in ``algorithms``; the
surrogate is re-evaluated from raw logits so finite differences of it form an
independent check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .env import TaskSpec, verify
from .policy import DecodingState

ENUMERATION_CAP = 10**6
SUBSET_ORACLE_MAX_N = 12


@dataclass
class EnumeratedPolicyDistribution:
    probs: dict
    total_mass: float
    correct_mass: float


def finite_diff_grad(f, z, h: float = 1e-5) -> np.ndarray:
    z = np.array(z, dtype=np.float64)
    out = np.empty_like(z)
    for i in range(z.size):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        fp, fm = f(zp), f(zm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"objective not finite near coordinate {i}")
        out[i] = (fp - fm) / (2 * h)
    return out


def _softmax(z, T=1.0):
    s = np.asarray(z, dtype=np.float64) / T
    e = np.exp(s - s.max())
    return e / e.sum()


def enumerate_sequences(policy, task: TaskSpec, prompt_id: int, temperature: float = 1.0,
                        cap: int = ENUMERATION_CAP) -> EnumeratedPolicyDistribution:
    V, L = task.vocab_size, task.max_response_length
    size = V**L
    if size > cap:
        raise ValueError(f"enumeration would visit up to {size} sequences, above the cap {cap}")
    probs: dict = {}

    def walk(prefix, mass):
        p = _softmax(policy.logits(DecodingState(prompt_id, prefix)), temperature)
        for tok in range(V):
            seq = prefix + (tok,)
            m = mass * p[tok]
            if tok == task.terminal_token or len(seq) == L:
                probs[seq] = m
            else:
                walk(seq, m)

    walk((), 1.0)
    total = math.fsum(probs.values())
    correct = math.fsum(m for s, m in probs.items() if verify(task, prompt_id, s).reward)
    return EnumeratedPolicyDistribution(probs, total, correct)


def exact_pass_at_k_sampling(p: float, k: int) -> float:
    if not 0.0 <= p <= 1.0 or k < 1:
        raise ValueError("need p in [0, 1] and k >= 1")
    return 1.0 - (1.0 - p) ** k


def pass_at_k_subset_oracle(outcomes, k: int) -> Fraction:
    outcomes = [bool(o) for o in outcomes]
    n = len(outcomes)
    if n > SUBSET_ORACLE_MAX_N:
        raise ValueError(f"subset enumeration limited to n <= {SUBSET_ORACLE_MAX_N}")
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    hits = total = 0
    for sub in itertools.combinations(range(n), k):
        total += 1
        hits += any(outcomes[i] for i in sub)
    return Fraction(hits, total)


# -- surrogate re-evaluation ------------------------------------------------


@dataclass
class FrozenToken:
    """Everything about one token that is held constant under differentiation."""
    state: DecodingState
    token: int
    adv: float
    weight: float
    mode: str  # "plain" | "pos" | "neg" | "masked"
    top: tuple = ()
    sg_factors: tuple = ()
    rank1: bool = False


def freeze_batch(batch, current, behavior, config, gate) -> list[FrozenToken]:
    """Fix the discrete choices and stop-gradient constants at the base point."""
    T = config.temperature
    out = []
    t = 0
    for group in batch:
        G = len(group.rollouts)
        for ro, adv in zip(group.rollouts, group.advantages):
            adv = float(adv)
            w = 1.0 / (G * len(ro))
            for state, rec in zip(ro.states(), ro.records):
                gated = bool(gate.gated[t])
                t += 1
                y = rec.token
                if (config.variant == "PSR" and adv < 0) or (config.variant == "NSR" and adv > 0):
                    out.append(FrozenToken(state, y, adv, w, "masked"))
                    continue
                simko = config.variant == "SimKO" and gated
                p = _softmax(current.logits(state), T)
                pb = _softmax(behavior.logits(state), T)
                if simko and adv > 0:
                    order = sorted(range(p.size), key=lambda i: (-p[i], i))
                    top = tuple(order[:config.smoothing_K])
                    g = p[y] / pb[y]
                    sg = tuple(g / (p[k] / pb[k]) for k in top)
                    out.append(FrozenToken(state, y, adv, w, "pos", top, sg))
                elif simko and adv < 0:
                    is_top = all(p[y] > p[i] or (p[y] == p[i] and y <= i) for i in range(p.size))
                    out.append(FrozenToken(state, y, adv, w, "neg", rank1=is_top))
                else:
                    out.append(FrozenToken(state, y, adv, w, "plain"))
    return out


def surrogate_value(tokens, logits_of, behavior, reference, config) -> float:
    """Clipped surrogate evaluated from raw logits; ``logits_of(state)`` may be perturbed."""
    T = config.temperature
    eps = config.clip_eps
    total = 0.0
    for ft in tokens:
        if ft.mode == "masked":
            continue
        p = _softmax(logits_of(ft.state), T)
        pb = _softmax(behavior.logits(ft.state), T)
        g = p[ft.token] / pb[ft.token]
        if ft.mode == "pos":
            a = config.alpha
            r = (1 - a) * g + a / len(ft.top) * sum(c * (p[k] / pb[k]) for k, c in zip(ft.top, ft.sg_factors))
        elif ft.mode == "neg" and ft.rank1:
            r = config.lambda_top1 * g
        else:
            r = g
        v = min(r * ft.adv, min(max(r, 1 - eps), 1 + eps) * ft.adv)
        if config.kl_beta > 0 and reference is not None:
            q = _softmax(reference.logits(ft.state), T)
            v -= config.kl_beta * float(np.sum(p * (np.log(p) - np.log(q))))
        total += ft.weight * v
    return total


def clip_margin(tokens, current, behavior, config) -> float:
    """Distance of the nearest modified ratio to a clip boundary."""
    T = config.temperature
    eps = config.clip_eps
    worst = math.inf
    for ft in tokens:
        if ft.mode == "masked" or ft.adv == 0:
            continue
        p = _softmax(current.logits(ft.state), T)
        pb = _softmax(behavior.logits(ft.state), T)
        r = p[ft.token] / pb[ft.token]
        if ft.mode == "neg" and ft.rank1:
            r *= config.lambda_top1
        worst = min(worst, abs(r - (1 - eps)), abs(r - (1 + eps)))
    return worst


def surrogate_fd_grads(tokens, current, behavior, reference, config, h: float = 1e-5) -> dict:
    """Central-difference gradient at every state touched by the batch."""
    by_state: dict = {}
    for ft in tokens:
        by_state.setdefault(ft.state, []).append(ft)
    grads = {}
    for state, toks in by_state.items():
        base = np.array(current.logits(state), dtype=np.float64)

        def f(z, state=state, toks=toks):
            return surrogate_value(toks, lambda s: z if s == state else current.logits(s),
                                   behavior, reference, config)

        grads[state] = finite_diff_grad(f, base, h)
    return grads
