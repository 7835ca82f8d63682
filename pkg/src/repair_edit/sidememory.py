"""Masked side-memory shards, activation-score routing and the routing margin loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .numeric import NonFiniteError, ShapeError, l2_norm

MAIN = "MAIN"


@dataclass
class ShardState:
    id: int
    W_prime: np.ndarray
    mask: np.ndarray
    assigned_samples: set = field(default_factory=set)
    train_loss: float = 0.0
    n_updates: int = 0

    def delta(self, W_v: np.ndarray) -> np.ndarray:
        return self.W_prime - W_v

    def copy(self) -> "ShardState":
        # masks are never written in place, so the copy shares it
        return ShardState(self.id, self.W_prime.copy(), self.mask,
                          set(self.assigned_samples), self.train_loss, self.n_updates)


@dataclass
class RoutingDecision:
    target: Union[str, int]
    scores: List[float]

    @property
    def to_main(self) -> bool:
        return self.target == MAIN


@dataclass(frozen=True)
class RoutingMarginConfig:
    gamma1: float = 2.0
    gamma2: float = 20.0
    gamma: float = 10.0
    tau: float = 0.0   # realised through the margins, never enforced directly

    def __post_init__(self):
        if not (self.gamma2 > self.gamma1 >= 0):
            raise ValueError(f"need gamma2 > gamma1 >= 0, got {self.gamma1}, {self.gamma2}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


def sample_mask(shape: Tuple[int, int], rho: float, rng: np.random.Generator) -> np.ndarray:
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"mask ratio must lie in (0, 1], got {rho}")
    return (rng.random(shape) < rho).astype(np.float64)


def init_shards(W_v: np.ndarray, k: int, rho: float, seed) -> List[ShardState]:
    if k < 1:
        raise ValueError("need at least one shard")
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"mask ratio must lie in (0, 1], got {rho}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [ShardState(i, W_v.copy(), sample_mask(W_v.shape, rho, rng)) for i in range(k)]


def score_matrix(A: np.ndarray, shards: Sequence[ShardState], W_v: np.ndarray) -> np.ndarray:
    """Scores ``||a (W'_i - W_v)||_2`` for every activation row and shard (n x k)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != W_v.shape[0]:
        raise ShapeError(f"activations of shape {A.shape} are incompatible with value matrix {W_v.shape}")
    out = np.zeros((A.shape[0], len(shards)))
    for j, s in enumerate(shards):
        P = A @ (s.W_prime - W_v)
        out[:, j] = np.sqrt(np.sum(P * P, axis=1))
    return out


def activation_score(a: np.ndarray, shard: ShardState, W_v: np.ndarray) -> float:
    """||a (W'_i - W_v)||_2."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"activation must be a vector, got shape {a.shape}")
    return float(score_matrix(a[None, :], [shard], W_v)[0, 0])


def all_scores(a: np.ndarray, shards: Sequence[ShardState], W_v: np.ndarray) -> List[float]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"activation must be a vector, got shape {a.shape}")
    return [float(v) for v in score_matrix(a[None, :], shards, W_v)[0]]


def _decide(scores: np.ndarray, shards: Sequence[ShardState], epsilon: float):
    best = int(np.argmax(scores))      # first max wins: lowest id on ties
    return MAIN if scores[best] <= epsilon else shards[best].id


def route(a: np.ndarray, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float) -> RoutingDecision:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if not shards:
        return RoutingDecision(MAIN, [])
    scores = all_scores(a, shards, W_v)
    return RoutingDecision(_decide(np.array(scores), shards, epsilon), scores)


def route_many(A: np.ndarray, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float
               ) -> Tuple[list, np.ndarray]:
    """Routing targets for every row of ``A`` plus the n x k score matrix."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    A = np.asarray(A, dtype=np.float64)
    if not shards:
        return [MAIN] * A.shape[0], np.zeros((A.shape[0], 0))
    S = score_matrix(A, shards, W_v)
    return [_decide(row, shards, epsilon) for row in S], S


def routed_value(decision: RoutingDecision, shards: Sequence[ShardState], W_v: np.ndarray) -> np.ndarray:
    if decision.to_main:
        return W_v
    for s in shards:
        if s.id == decision.target:
            return s.W_prime
    raise KeyError(f"no shard with id {decision.target}")


def assign_shard(a: np.ndarray, shards: Sequence[ShardState], W_v: np.ndarray,
                 tie_policy: str = "least_loaded") -> int:
    """Most active shard; exact ties go to the least-loaded, then lowest id."""
    if not shards:
        raise ValueError("no shards to assign to")
    scores = np.array(all_scores(a, shards, W_v))
    top = np.flatnonzero(scores == scores.max())
    if len(top) == 1 or tie_policy == "lowest_id":
        return shards[int(top[0])].id
    if tie_policy != "least_loaded":
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    loads = [len(shards[i].assigned_samples) for i in top]
    return shards[int(top[int(np.argmin(loads))])].id


def masked_update(shard: ShardState, grad: np.ndarray, eta: float) -> ShardState:
    """Plain SGD step restricted to the shard mask.

    The returned shard is a new object; the input is left untouched, which is
    what makes a rejected (non-finite) step leave the shard unchanged.
    """
    if grad.shape != shard.W_prime.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match shard {shard.W_prime.shape}")
    if not eta > 0:
        raise ValueError("eta must be > 0")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for shard {shard.id}; step rejected")
    step = -eta * (shard.mask * grad)
    return ShardState(shard.id, shard.W_prime + step, shard.mask, set(shard.assigned_samples),
                      shard.train_loss, shard.n_updates + 1)


def update_norm_ok(step: np.ndarray, grad: np.ndarray, eta: float) -> bool:
    # the bound is an exact coordinate-projection inequality; rounding can only
    # shave the left side, so a relative slack of a few ulps is enough
    return l2_norm(step) <= eta * l2_norm(grad) * (1.0 + 1e-12)


def overlap_inner_product_check(rho: float, trials: int, seed, dim: int = 64,
                                g_i: Optional[np.ndarray] = None,
                                g_j: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Monte Carlo estimate of E<M_i*g_i, M_j*g_j> / <g_i, g_j> against rho**2."""
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"mask ratio must lie in (0, 1], got {rho}")
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(seed)
    if g_i is None:
        g_i = rng.normal(size=dim)
    if g_j is None:
        # positively correlated pair so the reference inner product is far from 0
        g_j = g_i + 0.5 * rng.normal(size=dim)
    g_i = np.asarray(g_i, dtype=np.float64).ravel()
    g_j = np.asarray(g_j, dtype=np.float64).ravel()
    ref = float(g_i @ g_j)
    if ref == 0.0:
        raise ValueError("<g_i, g_j> = 0: scale factor undefined")
    prod = g_i * g_j
    total = 0.0
    chunk = 10_000
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        both = (rng.random((n, prod.size)) < rho) & (rng.random((n, prod.size)) < rho)
        total += float(np.sum(both @ prod))
        done += n
    return total / trials / ref, rho * rho


def _hinge(x):
    return np.maximum(0.0, x)


def routing_margin_loss(edit_scores, irrelevant_scores, cfg: RoutingMarginConfig) -> float:
    e = np.asarray(edit_scores, dtype=np.float64)
    i = np.asarray(irrelevant_scores, dtype=np.float64)
    if e.size == 0 or e.shape != i.shape:
        raise ValueError("margin loss needs paired, non-empty score lists")
    terms = _hinge(i - cfg.gamma1) + _hinge(cfg.gamma2 - e) + _hinge(cfg.gamma - (e - i))
    return float(np.mean(terms))


def routing_margin_grads(edit_scores, irrelevant_scores, cfg: RoutingMarginConfig):
    """(loss, dL/d edit_scores, dL/d irrelevant_scores) for the paired hinge loss."""
    e = np.asarray(edit_scores, dtype=np.float64)
    i = np.asarray(irrelevant_scores, dtype=np.float64)
    loss = routing_margin_loss(e, i, cfg)
    n = e.size
    t1 = (i - cfg.gamma1 > 0).astype(float)
    t2 = (cfg.gamma2 - e > 0).astype(float)
    t3 = (cfg.gamma - (e - i) > 0).astype(float)
    return loss, (-t2 - t3) / n, (t1 + t3) / n


def score_and_grad(a: np.ndarray, delta: np.ndarray) -> Tuple[float, np.ndarray]:
    """Score ||a delta|| and its gradient w.r.t. delta (zero at the kink)."""
    v = a @ delta
    s = l2_norm(v)
    if s == 0.0:
        return 0.0, np.zeros_like(delta)
    return s, np.outer(a, v / s)


def _row_units(V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(V, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return norms, np.where(norms[:, None] > 0, V / safe[:, None], 0.0)


def margin_loss_and_grad(edit_acts: np.ndarray, irr_acts: np.ndarray, delta: np.ndarray,
                         cfg: RoutingMarginConfig) -> Tuple[float, np.ndarray]:
    """L_a over paired activation rows and its gradient w.r.t. the shard delta."""
    se, ue = _row_units(np.atleast_2d(edit_acts) @ delta)
    si, ui = _row_units(np.atleast_2d(irr_acts) @ delta)
    loss, de, di = routing_margin_grads(se, si, cfg)
    grad = np.atleast_2d(edit_acts).T @ (de[:, None] * ue) + np.atleast_2d(irr_acts).T @ (di[:, None] * ui)
    return loss, grad


def paired_margin_loss_and_grad(edit_acts: np.ndarray, irr_acts: np.ndarray, pairs: np.ndarray,
                                delta: np.ndarray, cfg: RoutingMarginConfig) -> Tuple[float, np.ndarray]:
    """L_a where edit row ``i`` is paired with irrelevant rows ``pairs[i]``.

    Same value and gradient as :func:`margin_loss_and_grad` on the expanded
    pair list, but every distinct row is scored once.
    """
    E = np.atleast_2d(edit_acts)
    pairs = np.asarray(pairs)
    if pairs.ndim != 2 or pairs.shape[0] != E.shape[0]:
        raise ShapeError(f"pairs must have shape ({E.shape[0]}, k), got {pairs.shape}")
    se, ue = _row_units(E @ delta)
    si, ui = _row_units(np.atleast_2d(irr_acts) @ delta)
    k = pairs.shape[1]
    loss, de, di = routing_margin_grads(np.repeat(se, k), si[pairs.ravel()], cfg)
    de_rows = de.reshape(E.shape[0], k).sum(axis=1)
    di_rows = np.bincount(pairs.ravel(), weights=di, minlength=si.size)
    grad = E.T @ (de_rows[:, None] * ue) + np.atleast_2d(irr_acts).T @ (di_rows[:, None] * ui)
    return loss, grad
