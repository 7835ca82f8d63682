"""Loss-aware weighted TIES merging of shard deltas into the base value matrix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .numeric import ShapeError, l2_norm
from .sidememory import ShardState, sample_mask


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = 1.0
    merge_cadence: int = 30

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.merge_cadence < 1:
            raise ValueError("merge_cadence must be >= 1")


@dataclass
class MergeReport:
    weights: List[float]
    losses: List[float]
    shard_ids: List[int]
    consistent: int
    conflict: int
    delta_norm: float

    def to_dict(self) -> dict:
        return {"weights": self.weights, "losses": self.losses, "shard_ids": self.shard_ids,
                "consistent": self.consistent, "conflict": self.conflict,
                "delta_norm": self.delta_norm}


def trust_weights(losses: Sequence[float], alpha: float) -> np.ndarray:
    """softmax(-alpha * L_i), shifted by the max for overflow safety."""
    L = np.asarray(losses, dtype=np.float64)
    if L.size == 0:
        raise ValueError("need at least one loss")
    if not np.all(np.isfinite(L)):
        raise ValueError("losses must be finite")
    z = -alpha * L
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def ties_merge(deltas: Sequence[np.ndarray], weights: Sequence[float], W_v: np.ndarray
               ) -> Tuple[np.ndarray, MergeReport]:
    """Per coordinate: weighted sum when all nonzero deltas agree in sign,
    otherwise the single delta with the largest ``w_i * |tau_i|`` (lowest index
    on exact ties). Zeros never create a conflict."""
    if len(deltas) == 0:
        raise ValueError("need at least one delta")
    for d in deltas:
        if d.shape != W_v.shape:
            raise ShapeError(f"delta shape {d.shape} does not match W_v {W_v.shape}")
    T = np.stack([np.asarray(d, dtype=np.float64) for d in deltas])   # k x r x c
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (T.shape[0],):
        raise ValueError("one weight per delta required")
    pos = np.any(T > 0, axis=0)
    neg = np.any(T < 0, axis=0)
    conflict = pos & neg
    # explicit left-to-right accumulation keeps results bit-reproducible
    weighted_sum = np.zeros_like(W_v, dtype=np.float64)
    for wi, Ti in zip(w, T):
        weighted_sum = weighted_sum + wi * Ti
    trust = w[:, None, None] * np.abs(T)
    winner = np.argmax(trust, axis=0)          # argmax returns the first (lowest) index on ties
    kept = np.take_along_axis(T, winner[None], axis=0)[0]
    delta = np.where(conflict, kept, weighted_sum)
    report = MergeReport(list(map(float, w)), [], [], int(np.sum(~conflict & (pos | neg))),
                         int(np.sum(conflict)), l2_norm(delta))
    return W_v + delta, report


def resolve_coordinate(values: Sequence[float], weights: Sequence[float]) -> float:
    """Reference resolution of one coordinate by direct enumeration."""
    nonzero = [v for v in values if v != 0.0]
    signs = {v > 0 for v in nonzero}
    if len(signs) <= 1:
        total = 0.0
        for w, v in zip(weights, values):
            total += w * v
        return total
    best_i, best = 0, -1.0
    for i, (w, v) in enumerate(zip(weights, values)):
        score = w * abs(v)
        if score > best:
            best_i, best = i, score
    return values[best_i]


def merge_oracle_check(deltas: Sequence[np.ndarray], weights: Sequence[float], W_v: np.ndarray,
                       samples: int, seed) -> bool:
    merged, _ = ties_merge(deltas, weights, W_v)
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, W_v.shape[0], size=samples)
    cols = rng.integers(0, W_v.shape[1], size=samples)
    w = [float(x) for x in weights]
    for r, c in zip(rows, cols):
        vals = [float(d[r, c]) for d in deltas]
        expected = W_v[r, c] + resolve_coordinate(vals, w)
        if merged[r, c] != expected:
            return False
    return True


def post_merge_reset(shards: Sequence[ShardState], merged_W_v: np.ndarray, rho: float,
                     rng: np.random.Generator) -> List[ShardState]:
    """Re-base every shard on the merged matrix with a fresh mask and no samples."""
    return [ShardState(s.id, merged_W_v.copy(), sample_mask(merged_W_v.shape, rho, rng))
            for s in shards]
