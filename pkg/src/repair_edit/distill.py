"""Similarity batching, inner-batch distillation loss and consistency filtering.

Features are unit vectors; the first member of a batch is its teacher. The
distillation loss of a batch of ``b`` features ``o_0 .. o_{b-1}`` is::

    lambda_cos * mean_{i>=1} (1 - cos(o_i, o_0)) + theta_var * mean_i ||o_i - mean(o)||^2
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .numeric import l2_norm, log_softmax, softmax


@dataclass(frozen=True)
class KDConfig:
    lambda_cos: float = 0.2
    theta_var: float = 1.0
    eps_cons: float = 0.1
    temperature: float = 0.0
    batch_size: int = 4
    max_recluster_rounds: int = 3

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lambda_cos < 0 or self.theta_var < 0 or self.temperature < 0:
            raise ValueError("KD weights and temperature must be non-negative")
        if not self.eps_cons > 0:
            raise ValueError("eps_cons must be > 0")


@dataclass
class Batch:
    teacher: int
    students: List[int]
    features: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def members(self) -> List[int]:
        return [self.teacher] + list(self.students)

    def __len__(self) -> int:
        return 1 + len(self.students)


@dataclass
class ResidualPool:
    samples: Dict[int, float] = field(default_factory=dict)   # id -> last KD loss
    rounds: Dict[int, int] = field(default_factory=dict)      # id -> evictions so far

    def add(self, sid: int, loss: float) -> None:
        self.samples[sid] = float(loss)
        self.rounds[sid] = self.rounds.get(sid, 0) + 1

    def pop_all(self) -> List[int]:
        ids = sorted(self.samples)
        self.samples.clear()
        return ids

    def __contains__(self, sid) -> bool:
        return sid in self.samples

    def __len__(self) -> int:
        return len(self.samples)


def _unit(v: np.ndarray) -> np.ndarray:
    n = l2_norm(v)
    if n == 0.0:
        raise ValueError("zero-norm feature cannot be normalised")
    return np.asarray(v, dtype=np.float64) / n


def form_batches(features: Mapping[int, np.ndarray], b: int) -> Tuple[List[Batch], List[int]]:
    """Greedy medoid batching.

    Repeatedly picks as teacher the pooled sample with the highest mean cosine
    similarity to the pool, adds its ``b - 1`` nearest neighbours, and removes
    the batch. Ties go to the lowest sample id. A single leftover sample is
    returned as residual instead of a one-member batch.
    """
    if b < 2:
        raise ValueError("batch size must be >= 2")
    ids = sorted(features)
    if len(ids) < 2:
        return [], ids
    F = np.stack([_unit(features[i]) for i in ids])
    sim = F @ F.T
    pool = list(range(len(ids)))
    batches: List[Batch] = []
    while len(pool) >= 2:
        sub = sim[np.ix_(pool, pool)]
        mean_sim = sub.mean(axis=1)
        t_local = int(np.argmax(mean_sim))
        teacher = pool[t_local]
        others = [p for p in pool if p != teacher]
        # stable sort keeps lower ids first among equal similarities
        order = sorted(others, key=lambda p: -sim[teacher, p])
        chosen = order[:b - 1]
        members = [teacher] + chosen
        batches.append(Batch(ids[teacher], [ids[p] for p in chosen],
                             {ids[p]: F[p] for p in members}))
        pool = [p for p in pool if p not in members]
    return batches, [ids[p] for p in pool]


def _kd_parts(O: np.ndarray, cfg: KDConfig):
    m = O.shape[0]
    cos = O[1:] @ O[0]
    mean = O.mean(axis=0)
    dev = O - mean
    sq = np.sum(dev * dev, axis=1)
    l_cos = float(np.mean(1.0 - cos)) if m > 1 else 0.0
    l_var = float(np.mean(sq))
    return cos, dev, sq, l_cos, l_var


def kd_loss(batch_or_features, cfg: KDConfig, logits: Optional[np.ndarray] = None
            ) -> Tuple[float, np.ndarray]:
    """Total inner-batch KD loss and one consistency score per student.

    ``batch_or_features`` is a :class:`Batch` or an array whose row 0 is the
    teacher. The per-student score is ``lambda_cos * (1 - cos(o_i, o_0)) +
    theta_var * ||o_i - mean||^2``. When ``temperature > 0`` and ``logits``
    (one row per member) are given, ``mean_i KL(p_0 || p_i)`` is added to the
    total.
    """
    if isinstance(batch_or_features, Batch):
        X = np.stack([batch_or_features.features[i] for i in batch_or_features.members])
    else:
        X = np.asarray(batch_or_features, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("KD needs a batch of at least two members")
    O = np.stack([_unit(x) for x in X])
    cos, dev, sq, l_cos, l_var = _kd_parts(O, cfg)
    total = cfg.lambda_cos * l_cos + cfg.theta_var * l_var
    per_student = cfg.lambda_cos * (1.0 - cos) + cfg.theta_var * sq[1:]
    if cfg.temperature > 0 and logits is not None:
        total += soft_kd(logits, cfg.temperature)[0]
    return float(total), per_student


def kd_loss_grad(X: np.ndarray, cfg: KDConfig) -> Tuple[float, np.ndarray]:
    """Feature-level KD loss (teacher in row 0) and its gradient w.r.t. the raw rows of X."""
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm feature cannot be normalised")
    O = X / norms[:, None]
    cos, dev, sq, l_cos, l_var = _kd_parts(O, cfg)
    loss = cfg.lambda_cos * l_cos + cfg.theta_var * l_var
    dO = (2.0 * cfg.theta_var / m) * dev
    dO[1:] -= (cfg.lambda_cos / (m - 1)) * O[0]
    dO[0] -= (cfg.lambda_cos / (m - 1)) * O[1:].sum(axis=0)
    # back through o = x / ||x||
    proj = dO - np.sum(dO * O, axis=1, keepdims=True) * O
    return float(loss), proj / norms[:, None]


def soft_kd(logits: np.ndarray, temperature: float) -> Tuple[float, np.ndarray]:
    """mean_{i>=1} KL(p_0 || p_i) with p = softmax(z / T); teacher row held fixed.

    Returns the loss and its gradient w.r.t. the logits (row 0 is zero).
    """
    Z = np.asarray(logits, dtype=np.float64) / temperature
    logp = log_softmax(Z)
    p0 = np.exp(logp[0])
    kl = np.sum(p0 * (logp[0] - logp[1:]), axis=1)
    n = Z.shape[0] - 1
    grad = np.zeros_like(Z)
    grad[1:] = (softmax(Z[1:]) - p0) / (n * temperature)
    return float(np.mean(kl)), grad


def filter_and_recluster(batches: Sequence[Batch], per_sample: Mapping[int, float], cfg: KDConfig,
                         residual: ResidualPool) -> Tuple[List[Batch], ResidualPool]:
    """Move students with KD score >= eps_cons to the residual pool.

    ``per_sample`` maps student ids to their consistency score. Teachers are
    never evicted; a batch left with only its teacher dissolves and the
    teacher joins the residual pool too.
    """
    kept: List[Batch] = []
    for batch in batches:
        stay = []
        for sid in batch.students:
            loss = per_sample.get(sid, 0.0)
            if loss >= cfg.eps_cons:
                residual.add(sid, loss)
            else:
                stay.append(sid)
        if not stay:
            if batch.students:
                residual.add(batch.teacher, 0.0)
                continue
            kept.append(batch)
            continue
        feats = {i: batch.features[i] for i in [batch.teacher] + stay if i in batch.features}
        kept.append(Batch(batch.teacher, stay, feats))
    return kept, residual


def sphere_kd_loss(O: np.ndarray, u: np.ndarray, cfg: KDConfig) -> float:
    """KD loss of ``m`` unit students against a fixed unit teacher direction ``u``."""
    m = O.shape[0]
    mean = O.mean(axis=0)
    # 1 - <o, u> written as ||o - u||^2 / 2, which has no cancellation near the optimum
    l_cos = np.sum((O - u) ** 2) / (2 * m)
    l_var = np.sum((O - mean) ** 2) / m
    return float(cfg.lambda_cos * l_cos + cfg.theta_var * l_var)


def sphere_kd_egrad(O: np.ndarray, u: np.ndarray, cfg: KDConfig) -> np.ndarray:
    m = O.shape[0]
    mean = O.mean(axis=0)
    return -(cfg.lambda_cos / m) * np.broadcast_to(u, O.shape) + (2.0 * cfg.theta_var / m) * (O - mean)


def smoothness_bound(m: int, cfg: KDConfig) -> float:
    return 2.0 * cfg.lambda_cos / m + 4.0 * cfg.theta_var / m


def sphere_rgd_converge(u: np.ndarray, m: int, steps: int, eta: float, cfg: KDConfig, seed,
                        init: Optional[np.ndarray] = None, tol: float = 0.0):
    """Riemannian gradient descent of the KD loss on a product of unit spheres.

    Each step projects the Euclidean gradient onto the tangent space of every
    block and retracts with ``R_o(v) = (o + v) / ||o + v||``. Returns
    ``(final features, final loss, loss history)``; iteration stops early once
    the loss is <= ``tol``.
    """
    if m < 2:
        raise ValueError("need m >= 2 features")
    L_R = smoothness_bound(m, cfg)
    if not (0.0 < eta < 2.0 / L_R):
        raise ValueError(f"step size {eta} outside the admissible range (0, {2.0 / L_R})")
    u = _unit(u)
    if init is None:
        rng = np.random.default_rng(seed)
        O = rng.normal(size=(m, u.size))
    else:
        O = np.array(init, dtype=np.float64, copy=True)
    O /= np.linalg.norm(O, axis=1, keepdims=True)
    history = [sphere_kd_loss(O, u, cfg)]
    for _ in range(steps):
        if history[-1] <= tol:
            break
        G = sphere_kd_egrad(O, u, cfg)
        R = G - np.sum(G * O, axis=1, keepdims=True) * O
        O = O - eta * R
        O /= np.linalg.norm(O, axis=1, keepdims=True)
        history.append(sphere_kd_loss(O, u, cfg))
    return O, history[-1], history
