"""End-to-end editing loops: the sharded closed-loop editor and a naive fine-tuning arm."""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from ..distill import KDConfig, ResidualPool, filter_and_recluster, form_batches, kd_loss, soft_kd
from ..feedback import (FeedbackPool, reinit_shard, retrigger, shard_error_rates, should_retrigger)
from ..merge import post_merge_reset, ties_merge, trust_weights
from ..numeric import NonFiniteError
from ..sidememory import (MAIN, ShardState, assign_shard, init_shards, masked_update,
                          paired_margin_loss_and_grad, score_matrix, update_norm_ok)
from ..toylm import (ModelState, TeacherForced, ce_from_cache, init_model, stack_teacher_forced,
                     teacher_forced)
from .config import RunConfig
from .corpus import EditExample, generate_anchors, generate_corpus
from .metrics import MetricsRecord, compute_metrics, correctness_many, final_states

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "repair-manifest/1"
MAX_BAD_STEPS = 10


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunManifest:
    method: str
    config: dict
    seed: int
    records: List[MetricsRecord] = field(default_factory=list)
    retriggers: List[dict] = field(default_factory=list)
    merges: List[dict] = field(default_factory=list)
    calibration: List[dict] = field(default_factory=list)
    routing_snapshot: Optional[dict] = None
    events: List[dict] = field(default_factory=list)
    pool: dict = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, with_timings: bool = True) -> dict:
        d = {"schema": MANIFEST_SCHEMA, "method": self.method, "config": self.config,
             "seed": self.seed, "status": self.status, "error": self.error,
             "records": [r.to_dict() for r in self.records], "retriggers": self.retriggers,
             "merges": self.merges, "calibration": self.calibration,
             "routing_snapshot": self.routing_snapshot, "events": self.events, "pool": self.pool}
        if with_timings:
            # wall-clock numbers are the only non-reproducible part of a manifest
            d["timings"] = dict(sorted(self.timings.items()))
        return d


@dataclass
class RunResult:
    manifest: RunManifest
    model: ModelState
    W_main: np.ndarray
    shards: List[ShardState]
    epsilon: float
    corpus: List[EditExample]


def build_model(cfg: RunConfig) -> ModelState:
    return init_model(cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, seed=cfg.seed,
                      embed_scale=cfg.embed_scale, key_scale=cfg.key_scale,
                      value_scale=cfg.value_scale, unembed_scale=cfg.unembed_scale, decay=cfg.decay,
                      key_bias=cfg.key_bias, activation_fn=cfg.activation_fn,
                      unembed_init=cfg.unembed_init)


def build_corpus(cfg: RunConfig, model: ModelState) -> List[EditExample]:
    return generate_corpus(cfg.n_facts, cfg.vocab_size, cfg.rephrases_per_fact, cfg.seed, model,
                           cfg.target_len)


def windows(n: int, size: int, cadence: int) -> List[Tuple[int, int]]:
    """Consecutive ``[lo, hi)`` edit windows that never straddle a merge boundary."""
    out, lo = [], 0
    while lo < n:
        hi = min(lo + size, n, (lo // cadence + 1) * cadence)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass
class _Batch:
    """Per-batch quantities that stay fixed while the shard trains."""
    members: List[int]
    E: np.ndarray               # prompt activations, one row per member
    tf: TeacherForced           # every member's target positions stacked
    kd_feature: float           # feature KD loss (independent of V)


class _Timer:
    def __init__(self, sink: Dict[str, float]):
        self.sink = sink

    @contextmanager
    def __call__(self, phase: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.sink[phase] = self.sink.get(phase, 0.0) + time.perf_counter() - t0


class RepairEditor:
    """Mutable state of one sharded editing run."""

    def __init__(self, cfg: RunConfig, model: ModelState, corpus: Sequence[EditExample]):
        cfg.validate()
        if len(corpus) < cfg.n_edits:
            raise ValueError(f"corpus has {len(corpus)} examples, need {cfg.n_edits}")
        self.cfg = cfg
        self.model = model
        self.corpus = list(corpus)
        self.stream = self.corpus[:cfg.n_edits]
        self.by_id = {ex.id: ex for ex in self.stream}
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.W_main = model.W_v.copy()
        self.shards = init_shards(self.W_main, cfg.n_shards, cfg.mask_ratio, self.rng)
        self.margin_cfg = cfg.margin_config()
        self.kd_cfg: KDConfig = cfg.kd_config()
        self.pool = FeedbackPool(cfg.tau_correct, cfg.tau_prune, cfg.tau_E, cfg.max_iter)
        self.residual = ResidualPool()
        self.epsilon = 0.0 if cfg.epsilon is None else cfg.epsilon
        self.seen: List[int] = []
        self.merged: Set[int] = set()
        self.bad_steps = 0
        self.manifest = RunManifest("repair", cfg.to_dict(), cfg.seed)
        self.timer = _Timer(self.manifest.timings)

        anchors = generate_anchors(self.corpus, cfg.vocab_size, cfg.n_anchors + cfg.n_calibration,
                                   cfg.seed)
        _, acts = final_states(model, anchors)
        self.anchor_acts = acts[:cfg.n_anchors]
        self.calib_acts = acts[cfg.n_anchors:]
        self.anchor_perm = np.random.default_rng([cfg.seed, 4]).permutation(cfg.n_anchors)
        self.anchor_shuffled = self.anchor_acts[self.anchor_perm]
        self.tf = {ex.id: teacher_forced(model, ex.edit_prompt, ex.edit_target) for ex in self.stream}
        self.act = {sid: tf.prompt_activation for sid, tf in self.tf.items()}

    # ---- training -------------------------------------------------------

    def _shard(self, sid: int) -> int:
        return next(i for i, s in enumerate(self.shards) if s.id == sid)

    def _batch(self, members: Sequence[int]) -> "_Batch":
        E = np.stack([self.act[s] for s in members])
        tf = stack_teacher_forced([self.tf[s] for s in members])
        kd = kd_loss(E, self.kd_cfg)[0] if len(members) >= 2 and self.cfg.lambda_kd > 0 else 0.0
        return _Batch(list(members), E, tf, kd)

    def _kd_terms(self, batch: "_Batch", V: np.ndarray):
        """Batch KD loss and its gradient w.r.t. V.

        The feature term lives on the prompt activations, which do not depend
        on V, so only the optional soft term (teacher logits held fixed)
        contributes a gradient.
        """
        loss, grad = batch.kd_feature, np.zeros_like(V)
        if self.kd_cfg.temperature > 0:
            A0 = np.stack([self.tf[s].A[0] for s in batch.members])
            H = np.stack([self.tf[s].S[0] for s in batch.members]) + A0 @ V
            l_soft, g_logits = soft_kd(H @ self.model.unembed, self.kd_cfg.temperature)
            loss += l_soft
            grad = A0.T @ (g_logits @ self.model.unembed.T)
        return loss, grad

    def consistency_scores(self, members: Sequence[int]) -> Dict[int, float]:
        _, per = kd_loss(np.stack([self.act[s] for s in members]), self.kd_cfg)
        return {s: float(v) for s, v in zip(members[1:], per)}

    def batch_loss_and_grad(self, batch: "_Batch", V: np.ndarray, irr_idx: np.ndarray):
        cfg = self.cfg
        m = len(batch.members)
        # summed CE of every member in one pass, then the mean over members
        loss_e, g = ce_from_cache(self.model, batch.tf, V, with_grad=True)
        loss_e /= m
        g /= m
        rows, pairs = np.unique(irr_idx, return_inverse=True)
        la, ga = paired_margin_loss_and_grad(batch.E, self.anchor_acts[rows], pairs.reshape(irr_idx.shape),
                                             V - self.W_main, self.margin_cfg)
        total = loss_e + cfg.lambda_a * la
        grad = g + cfg.lambda_a * ga
        if m >= 2 and cfg.lambda_kd > 0:
            lk, gk = self._kd_terms(batch, V)
            total += cfg.lambda_kd * lk
            grad = grad + cfg.lambda_kd * gk
        return total, loss_e, grad

    def irrelevant(self, m: int, V: np.ndarray) -> np.ndarray:
        """Anchor indices paired with each of ``m`` edits, shape ``(m, irrelevant_per_edit)``.

        ``uniform`` draws them at random. ``hardest`` scores a random candidate
        pool against the current delta and keeps the highest-scoring anchors,
        so the hinge on irrelevant scores sees its violators.
        """
        cfg = self.cfg
        n, k = len(self.anchor_acts), cfg.irrelevant_per_edit
        if cfg.irrelevant_sampling == "uniform":
            return self.rng.integers(0, n, size=(m, k))
        # a random window of a fixed shuffle: a fresh candidate pool without a gather
        c = min(n, cfg.candidate_pool)
        lo = int(self.rng.integers(0, n - c + 1))
        scores = np.linalg.norm(self.anchor_shuffled[lo:lo + c] @ (V - self.W_main), axis=1)
        top = self.anchor_perm[lo:lo + c][np.argsort(-scores, kind="stable")[:k]]
        return np.tile(top, (m, 1))

    def train_batch(self, j: int, members: Sequence[int]) -> None:
        cfg = self.cfg
        shard = self.shards[j]
        loss_e = float("nan")
        batch = self._batch(members)
        for it in range(cfg.n_iter):
            irr = self.irrelevant(len(members), shard.W_prime)
            total, loss_e, grad = self.batch_loss_and_grad(batch, shard.W_prime, irr)
            try:
                if not np.isfinite(total):
                    raise NonFiniteError(f"non-finite batch loss {total}")
                new = masked_update(shard, grad, cfg.edit_lr)
            except NonFiniteError as exc:
                self.bad_steps += 1
                self.manifest.events.append({"event": "skipped_step", "shard": shard.id,
                                             "members": list(members), "iter": it, "reason": str(exc)})
                log.warning("skipped step on shard %d: %s", shard.id, exc)
                if self.bad_steps >= MAX_BAD_STEPS:
                    raise DivergenceError(f"{self.bad_steps} consecutive non-finite steps") from None
                continue
            self.bad_steps = 0
            if not update_norm_ok(new.W_prime - shard.W_prime, grad, cfg.edit_lr):
                raise AssertionError("masked update exceeded eta * ||g||")
            shard = new
        shard.assigned_samples |= set(members)
        shard.train_loss = float(loss_e)
        self.shards[j] = shard

    def _release(self, ids) -> None:
        ids = set(ids)
        for s in self.shards:
            s.assigned_samples -= ids

    def train_pool(self, ids: Sequence[int], evict: bool = True, shard: Optional[int] = None) -> None:
        """Batch ``ids`` by activation similarity and train each batch into its shard.

        With ``shard`` given every batch goes to that shard (re-trigger retraining).
        Evicted students land in the residual pool; once they have used up their
        recluster rounds they go to the feedback pool instead.
        """
        ids = sorted(ids)
        self._release(ids)
        batches, leftover = form_batches({s: self.act[s] for s in ids}, self.kd_cfg.batch_size)
        for batch in batches:
            j = shard if shard is not None else self._shard(
                assign_shard(self.act[batch.teacher], self.shards, self.W_main, self.cfg.tie_policy))
            self.train_batch(j, batch.members)
            if not evict:
                continue
            kept, _ = filter_and_recluster([batch], self.consistency_scores(batch.members),
                                           self.kd_cfg, self.residual)
            keep = set(kept[0].members) if kept else set()
            self._release(set(batch.members) - keep)
            for sid in sorted(set(batch.members) - keep):
                if self.residual.rounds[sid] > self.kd_cfg.max_recluster_rounds:
                    # out of recluster rounds: hand over to the feedback pool as a presumptive failure
                    del self.residual.samples[sid]
                    self.pool.record(sid, self.shards[j].id, 0.0)
                    self.manifest.events.append({"event": "recluster_exhausted", "sample": sid})
        for sid in leftover:
            j = shard if shard is not None else self._shard(
                assign_shard(self.act[sid], self.shards, self.W_main, self.cfg.tie_policy))
            self.train_batch(j, [sid])

    # ---- routing / evaluation -------------------------------------------

    def max_scores(self, A: np.ndarray) -> np.ndarray:
        """Largest shard score of every activation row (0 with no rows or shards)."""
        S = score_matrix(np.atleast_2d(A), self.shards, self.W_main)
        return S.max(axis=1) if S.size else np.zeros(S.shape[0])

    def held(self) -> List[int]:
        return sorted(set().union(*[s.assigned_samples for s in self.shards]))

    def calibrate(self, step: int) -> None:
        anchor_max = float(self.max_scores(self.calib_acts).max(initial=0.0))
        held = self.held()
        edit_min = float(self.max_scores(self._acts(held)).min()) if held else None
        if self.cfg.epsilon is not None:
            eps = self.cfg.epsilon
        elif edit_min is not None and edit_min > anchor_max:
            eps = 0.5 * (anchor_max + edit_min)
        else:
            eps = anchor_max
        self.epsilon = float(eps)
        self.manifest.calibration.append({"step": step, "epsilon": self.epsilon,
                                          "anchor_max": float(anchor_max),
                                          "edit_min": None if edit_min is None else float(edit_min)})

    def monitored(self) -> List[int]:
        return [s for s in self.seen if s not in self.residual]

    def _acts(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.act[s] for s in ids]) if ids else np.zeros((0, self.model.ffn_dim))

    def evaluate(self) -> Dict[int, Tuple[int, float]]:
        ids = self.monitored()
        res = correctness_many(self.model, self.shards, self.W_main, self.epsilon,
                               [self.by_id[s] for s in ids], self.cfg.mode)
        holder = {sid: s.id for s in self.shards for sid in s.assigned_samples}
        # a held edit that slipped under epsilon is a failure of the shard holding it
        return {sid: (holder.get(sid, MAIN) if t == MAIN else t, v) for sid, (t, v) in zip(ids, res)}

    def feedback(self, step: int) -> None:
        evals = self.evaluate()
        for sid, (shard, score) in evals.items():
            self.pool.record(sid, shard, score)
        rates = shard_error_rates(evals, len(self.shards), self.pool.tau_correct)
        if not should_retrigger(self.pool, rates):
            return

        def retrain(j: int, ids: List[int]) -> None:
            self.train_pool(ids, evict=False, shard=j)
            self.merged -= set(ids)

        def evaluate_fresh():
            self.calibrate(step)
            return self.evaluate()

        def reinit(shard: ShardState) -> ShardState:
            return reinit_shard(shard, self.W_main, self.cfg.mask_ratio, self.cfg.sigma_init, self.rng)

        rep = retrigger(self.pool, self.shards, rates, retrain, evaluate_fresh, reinit)
        d = rep.to_dict()
        d["step"] = step
        d["pool_size"] = len(self.pool)
        self.manifest.retriggers.append(d)

    # ---- merging ----------------------------------------------------------

    def routing_snapshot(self, step: int) -> dict:
        held = self.held()
        _, loc = final_states(self.model, [self.by_id[s].locality_prompt for s in self.seen])
        return {"step": step, "epsilon": self.epsilon, "edit_ids": held,
                "edit_scores": self.max_scores(self._acts(held)).tolist(),
                "locality_scores": self.max_scores(loc).tolist()}

    def merge(self, step: int) -> None:
        self.manifest.routing_snapshot = self.routing_snapshot(step)
        active = [s for s in self.shards if s.assigned_samples]
        if active:
            losses = []
            for s in active:
                ids = sorted(s.assigned_samples)
                losses.append(float(np.mean([ce_from_cache(self.model, self.tf[i], s.W_prime) for i in ids])))
            w = trust_weights(losses, self.cfg.alpha)
            merged, rep = ties_merge([s.delta(self.W_main) for s in active], w, self.W_main)
            rep.losses = losses
            rep.shard_ids = [s.id for s in active]
            d = rep.to_dict()
            d["step"] = step
            d["merged_samples"] = self.held()
            self.manifest.merges.append(d)
            self.merged |= set(self.held())
            self.W_main = merged
        self.shards = post_merge_reset(self.shards, self.W_main, self.cfg.mask_ratio, self.rng)
        self.calibrate(step)

    # ---- driver -----------------------------------------------------------

    def record(self, step: int) -> None:
        examples = [self.by_id[s] for s in self.seen]
        self.manifest.records.append(
            compute_metrics(self.model, self.shards, self.W_main, examples, self.epsilon, step))

    def run(self) -> RunResult:
        cfg = self.cfg
        since_merge = 0
        plan = windows(cfg.n_edits, cfg.edit_window, cfg.merge_cadence)
        try:
            for w, (lo, hi) in enumerate(plan):
                last = w == len(plan) - 1
                new_ids = [ex.id for ex in self.stream[lo:hi]]
                with self.timer("train"):
                    self.train_pool(new_ids + self.residual.pop_all())
                    if last:
                        # flush: rounds are bounded, so this terminates
                        while len(self.residual):
                            self.train_pool(self.residual.pop_all())
                self.seen.extend(new_ids)
                since_merge += len(new_ids)
                with self.timer("feedback"):
                    self.calibrate(hi)
                    self.feedback(hi)
                if since_merge >= cfg.merge_cadence or (last and cfg.final_merge):
                    with self.timer("merge"):
                        self.merge(hi)
                        since_merge = 0
                    with self.timer("feedback"):
                        self.feedback(hi)
                with self.timer("metrics"):
                    self.record(hi)
        except DivergenceError as exc:
            self.manifest.status = "aborted"
            self.manifest.error = str(exc)
            log.error("run aborted: %s", exc)
        if not self.pool.budget_left:
            for sid in sorted(self.pool.failures):
                self.pool.expel(sid, "budget exhausted")
        self.manifest.pool = {"failures": {str(k): [v[0], v[1]] for k, v in sorted(self.pool.failures.items())},
                              "expelled": {str(k): v for k, v in sorted(self.pool.expelled.items())},
                              "retrigger_count": {str(k): v for k, v in sorted(self.pool.retrigger_count.items())},
                              "total_retriggers": self.pool.total_retriggers}
        return RunResult(self.manifest, self.model, self.W_main, self.shards, self.epsilon, self.corpus)


def run_repair(cfg: RunConfig, corpus: Optional[Sequence[EditExample]] = None,
               model: Optional[ModelState] = None) -> RunResult:
    model = model if model is not None else build_model(cfg)
    corpus = corpus if corpus is not None else build_corpus(cfg, model)
    t0 = time.perf_counter()
    res = RepairEditor(cfg, model, corpus).run()
    res.manifest.timings["total"] = time.perf_counter() - t0
    return res


def run_naive_ft(cfg: RunConfig, corpus: Optional[Sequence[EditExample]] = None,
                 model: Optional[ModelState] = None) -> RunResult:
    """Sequential unmasked SGD on the value matrix, one edit at a time."""
    cfg.validate()
    model = model if model is not None else build_model(cfg)
    corpus = list(corpus) if corpus is not None else build_corpus(cfg, model)
    if len(corpus) < cfg.n_edits:
        raise ValueError(f"corpus has {len(corpus)} examples, need {cfg.n_edits}")
    manifest = RunManifest("naive", cfg.to_dict(), cfg.seed)
    timer = _Timer(manifest.timings)
    t0 = time.perf_counter()
    V = model.W_v.copy()
    stream = corpus[:cfg.n_edits]
    seen: List[EditExample] = []
    bad = 0
    try:
        for lo, hi in windows(cfg.n_edits, cfg.edit_window, cfg.merge_cadence):
            with timer("train"):
                for ex in stream[lo:hi]:
                    tf = teacher_forced(model, ex.edit_prompt, ex.edit_target)
                    for it in range(cfg.n_iter):
                        loss, g = ce_from_cache(model, tf, V, with_grad=True)
                        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                            bad += 1
                            manifest.events.append({"event": "skipped_step", "edit": ex.id, "iter": it})
                            if bad >= MAX_BAD_STEPS:
                                raise DivergenceError(f"{bad} consecutive non-finite steps")
                            continue
                        bad = 0
                        V = V - cfg.edit_lr * g
            seen.extend(stream[lo:hi])
            with timer("metrics"):
                manifest.records.append(compute_metrics(model, [], V, seen, 0.0, hi))
    except DivergenceError as exc:
        manifest.status = "aborted"
        manifest.error = str(exc)
    manifest.timings["total"] = time.perf_counter() - t0
    return RunResult(manifest, model, V, [], 0.0, corpus)
