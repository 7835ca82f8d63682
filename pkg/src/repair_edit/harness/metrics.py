"""Routed decoding and the Rel / Gen / Loc / OP / PPL metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..numeric import log_softmax
from ..sidememory import MAIN, ShardState, route_many
from ..toylm import ModelState, context_states, decode_from_states, ffn_activation, teacher_forced
from .corpus import EditExample

METRICS_SCHEMA = "repair-metrics/1"


@dataclass
class MetricsRecord:
    step: int
    rel: float
    gen: float
    loc: float
    op: float
    ppl: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = METRICS_SCHEMA
        return d


def overall(rel: float, gen: float, loc: float) -> float:
    """Geometric mean; exactly 0 when any factor is 0."""
    if rel <= 0 or gen <= 0 or loc <= 0:
        return 0.0
    return float(np.cbrt(rel * gen * loc))


def final_states(model: ModelState, prompts: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Final context state and FFN activation of every prompt (rows)."""
    S = np.stack([context_states(model, p)[-1] for p in prompts])
    return S, ffn_activation(model, S)


def _value_of(target, shards: Sequence[ShardState], W_v: np.ndarray) -> np.ndarray:
    if target == MAIN:
        return W_v
    return next(s.W_prime for s in shards if s.id == target)


def routed_decode_many(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray,
                       epsilon: float, prompts: Sequence[Sequence[int]], max_len: int
                       ) -> Tuple[List[List[int]], list, np.ndarray]:
    """Route each prompt on its final activation, then decode it greedily under that memory.

    Returns the decodes, the routing targets and the prompt-by-shard score matrix.
    """
    S, A = final_states(model, prompts)
    targets, scores = route_many(A, shards, W_v, epsilon)
    out: List[List[int]] = [[] for _ in prompts]
    for tgt in sorted(set(targets), key=str):
        rows = [i for i, t in enumerate(targets) if t == tgt]
        for i, dec in zip(rows, decode_from_states(model, S[rows], max_len, _value_of(tgt, shards, W_v))):
            out[i] = dec
    return out, targets, scores


def routed_decode(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float,
                  prompt: Sequence[int], max_len: int):
    outs, targets, _ = routed_decode_many(model, shards, W_v, epsilon, [prompt], max_len)
    return outs[0], targets[0]


def routed_nll_many(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float,
                    pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> List[float]:
    """Summed next-token NLL of each continuation under its routed memory."""
    if not pairs:
        return []
    _, A = final_states(model, [c for c, _ in pairs])
    targets, _ = route_many(A, shards, W_v, epsilon)
    out = []
    for (ctx, cont), tgt in zip(pairs, targets):
        if len(cont) == 0:
            raise ValueError("continuations must be non-empty")
        tf = teacher_forced(model, ctx, cont)
        logp = log_softmax((tf.S + tf.A @ _value_of(tgt, shards, W_v)) @ model.unembed)
        out.append(float(-np.sum(logp[np.arange(len(cont)), tf.target])))
    return out


def compute_ppl(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float,
                pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> float:
    """exp of the mean per-token NLL over ``(context, continuation)`` pairs."""
    count = sum(len(c) for _, c in pairs)
    if count == 0:
        raise ValueError("need at least one continuation token")
    return math.exp(sum(routed_nll_many(model, shards, W_v, epsilon, pairs)) / count)


def correctness_many(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float,
                     examples: Sequence[EditExample], mode: str = "qa") -> List[Tuple[int, float]]:
    """``(route target, correctness score)`` per example.

    The target is a shard id or ``MAIN``. The score is the exact-match
    indicator in qa mode and ``min(1, 1/PPL)`` of the edit target otherwise.
    """
    if not examples:
        return []
    L = max(len(ex.edit_target) for ex in examples)
    preds, targets, _ = routed_decode_many(model, shards, W_v, epsilon,
                                           [ex.edit_prompt for ex in examples], L)
    if mode == "qa":
        vals = [float(p[:len(ex.edit_target)] == ex.edit_target) for p, ex in zip(preds, examples)]
    else:
        nll = routed_nll_many(model, shards, W_v, epsilon,
                              [(ex.edit_prompt, ex.edit_target) for ex in examples])
        vals = [min(1.0, math.exp(-v / len(ex.edit_target))) for v, ex in zip(nll, examples)]
    return list(zip(targets, vals))


def evaluate_edit(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float,
                  ex: EditExample, mode: str = "qa") -> Tuple[List[int], bool, float]:
    """Prediction, exact-match flag and correctness score for one example."""
    pred, _ = routed_decode(model, shards, W_v, epsilon, ex.edit_prompt, len(ex.edit_target))
    _, score = correctness_many(model, shards, W_v, epsilon, [ex], mode)[0]
    return pred, pred == ex.edit_target, score


def compute_metrics(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray,
                    examples: Sequence[EditExample], epsilon: float, step: int = 0) -> MetricsRecord:
    if not examples:
        raise ValueError("examples must be non-empty")
    prompts: List[Sequence[int]] = []
    wanted: List[Tuple[str, List[int]]] = []
    for ex in examples:
        prompts.append(ex.edit_prompt)
        wanted.append(("rel", ex.edit_target))
        for r in ex.rephrases:
            prompts.append(r)
            wanted.append(("gen", ex.edit_target))
        prompts.append(ex.locality_prompt)
        wanted.append(("loc", ex.locality_reference))
    # greedy decoding is prefix-consistent, so one long decode serves every length
    L = max(len(ex.edit_target) for ex in examples)
    preds, _, _ = routed_decode_many(model, shards, W_v, epsilon, prompts, L)
    hits: Dict[str, int] = {"rel": 0, "gen": 0, "loc": 0}
    totals: Dict[str, int] = {"rel": 0, "gen": 0, "loc": 0}
    for (kind, ref), pred, ex in zip(wanted, preds, _expand(examples)):
        # locality references were decoded with the edit target's length
        hits[kind] += pred[:len(ex.edit_target)] == ref
        totals[kind] += 1
    rel = hits["rel"] / totals["rel"]
    gen = hits["gen"] / totals["gen"] if totals["gen"] else 0.0
    loc = hits["loc"] / totals["loc"]
    ppl = compute_ppl(model, shards, W_v, epsilon, [(ex.edit_prompt, ex.edit_target) for ex in examples])
    return MetricsRecord(step, rel, gen, loc, overall(rel, gen, loc), ppl)


def _expand(examples: Sequence[EditExample]):
    for ex in examples:
        for _ in range(2 + len(ex.rephrases)):
            yield ex
