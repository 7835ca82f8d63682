"""Closed-loop error feedback: failure pooling, shard error rates and re-triggering."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .sidememory import MAIN, ShardState, sample_mask


@dataclass
class FeedbackPool:
    tau_correct: float = 0.85
    tau_prune: float = 0.5
    tau_E: int = 10
    max_iter: int = 10000
    failures: Dict[int, Tuple[object, float]] = field(default_factory=dict)  # id -> (shard, score)
    retrigger_count: Dict[int, int] = field(default_factory=dict)
    total_retriggers: int = 0
    expelled: Dict[int, str] = field(default_factory=dict)

    def record(self, sid: int, shard, score: float) -> bool:
        """Pool ``sid`` if its score is a failure, clear it otherwise. Returns True on failure."""
        if score <= self.tau_correct:
            self.failures[sid] = (shard, float(score))
            return True
        self.failures.pop(sid, None)
        return False

    def clear(self, sid: int) -> None:
        self.failures.pop(sid, None)

    def expel(self, sid: int, reason: str) -> None:
        self.failures.pop(sid, None)
        self.expelled[sid] = reason

    @property
    def budget_left(self) -> bool:
        return self.total_retriggers < self.max_iter

    def __len__(self) -> int:
        return len(self.failures)


@dataclass
class RetriggerReport:
    pruned_shard: int
    retrain_size: int
    pre_error_rates: List[float]
    post_error_rates: List[float]
    ordinal: int
    cleared: int = 0

    def to_dict(self) -> dict:
        return {"pruned_shard": self.pruned_shard, "retrain_size": self.retrain_size,
                "pre_error_rates": self.pre_error_rates, "post_error_rates": self.post_error_rates,
                "ordinal": self.ordinal, "cleared": self.cleared}


def error_rate(scores: Iterable[float], tau_correct: float) -> float:
    """Share of routed samples whose correctness score is <= tau_correct (0 if none)."""
    s = list(scores)
    if not s:
        return 0.0
    return sum(1 for v in s if v <= tau_correct) / len(s)


def shard_error_rates(evaluations: Mapping[int, Tuple[int, float]], n_shards: int,
                      tau_correct: float) -> List[float]:
    """Per-shard error rate from ``{sample id: (routed shard, correctness score)}``.

    Samples attributed to no shard (routed shard ``MAIN``) count towards none.
    """
    per: List[List[float]] = [[] for _ in range(n_shards)]
    for sid in sorted(evaluations):
        shard, score = evaluations[sid]
        if shard != MAIN:
            per[shard].append(score)
    return [error_rate(p, tau_correct) for p in per]


def should_retrigger(pool: FeedbackPool, rates: Sequence[float]) -> bool:
    if not pool.budget_left:
        return False
    return (max(rates, default=0.0) > pool.tau_prune) or (len(pool) > pool.tau_E)


def worst_shard(rates: Sequence[float]) -> int:
    if len(rates) == 0:
        raise ValueError("no shards exist")
    return int(np.argmax(rates))


def reinit_shard(shard: ShardState, W_v: np.ndarray, rho: float, sigma_init: float,
                 rng: np.random.Generator) -> ShardState:
    """Fresh mask, masked Gaussian perturbation of W_v, empty sample set."""
    mask = sample_mask(W_v.shape, rho, rng)
    noise = rng.normal(size=W_v.shape)
    return ShardState(shard.id, W_v + sigma_init * (noise * mask), mask)


def finite_time_bound(r0: float, tau_prune: float, delta: float) -> int:
    """N* = ceil((r0 - tau_prune)_+ / delta), evaluated exactly on the binary inputs."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    gap = max(Fraction(r0) - Fraction(tau_prune), Fraction(0))
    return int(math.ceil(gap / Fraction(delta)))


def simulate_delta_process(r0: float, tau_prune: float, delta: float, rng: np.random.Generator,
                           slack: float = 0.5, max_steps: int = 100000) -> List[Fraction]:
    """Exact error-rate trajectory where every re-trigger above threshold cuts >= delta.

    Each cut is ``delta * (1 + slack * U)``, ``U ~ Uniform[0, 1)``, clamped at
    zero; ``slack = 0`` is the worst case the assumption allows. Rationals are
    used so the comparison with the threshold is not blurred by rounding.
    """
    r = [Fraction(r0)]
    tau = Fraction(tau_prune)
    d = Fraction(delta)
    while r[-1] > tau and len(r) <= max_steps:
        cut = d * (1 + Fraction(slack) * Fraction(rng.random()))
        r.append(max(r[-1] - cut, Fraction(0)))
    return r


def piecewise_linear_bound_holds(traj: Sequence[Fraction], tau_prune: float, delta: float) -> bool:
    """r_n <= max(tau_prune, r_0 - n * delta) for every step, checked exactly."""
    r0 = Fraction(traj[0])
    tau = Fraction(tau_prune)
    d = Fraction(delta)
    return all(Fraction(r) <= max(tau, r0 - n * d) for n, r in enumerate(traj))


def retrigger(pool: FeedbackPool, shards: List[ShardState], rates: Sequence[float],
              retrain: Callable[[int, List[int]], None],
              evaluate: Callable[[], Mapping[int, Tuple[int, float]]],
              reinit: Callable[[ShardState], ShardState]) -> RetriggerReport:
    """Prune the worst shard, rebuild it, and retrain pooled failures into it.

    ``retrain(shard_id, sample_ids)`` trains the rebuilt shard in place,
    ``evaluate()`` returns fresh ``{sample id: (routed shard, score)}`` for
    every monitored sample, and ``reinit`` produces the fresh shard.
    """
    if not shards:
        raise ValueError("no shards exist")
    j = worst_shard(rates)
    pool.total_retriggers += 1
    pool.retrigger_count[j] = pool.retrigger_count.get(j, 0) + 1
    orphaned = sorted(shards[j].assigned_samples)
    shards[j] = reinit(shards[j])
    retrain_ids = sorted(set(pool.failures) | set(orphaned))
    retrain(j, retrain_ids)
    fresh = evaluate()
    cleared = 0
    for sid in retrain_ids:
        if sid in fresh:
            shard, score = fresh[sid]
            was_failure = sid in pool.failures
            if not pool.record(sid, shard, score) and was_failure:
                cleared += 1
    post = shard_error_rates(fresh, len(shards), pool.tau_correct)
    return RetriggerReport(j, len(retrain_ids), list(rates), post, pool.total_retriggers, cleared)
