import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from repair_edit.feedback import (FeedbackPool, error_rate, finite_time_bound,
                                  piecewise_linear_bound_holds, reinit_shard, retrigger,
                                  shard_error_rates, should_retrigger, simulate_delta_process,
                                  worst_shard)
from repair_edit.merge import (MergeConfig, merge_oracle_check, post_merge_reset,
                               resolve_coordinate, ties_merge, trust_weights)
from repair_edit.numeric import ShapeError, l2_norm
from repair_edit.sidememory import MAIN, ShardState, all_scores, init_shards


def test_error_rate_examples():
    assert error_rate([0.9, 0.2, 0.3], 0.85) == pytest.approx(2 / 3)
    assert error_rate([], 0.85) == 0.0
    assert error_rate([0.0, 0.1], 0.85) == 1.0


def test_shard_error_rates_empty_shard_is_zero():
    ev = {1: (0, 0.0), 2: (0, 1.0), 3: (MAIN, 0.0)}
    assert shard_error_rates(ev, 3, 0.85) == [0.5, 0.0, 0.0]


def test_should_retrigger_examples():
    pool = FeedbackPool(tau_prune=0.5, tau_E=10)
    for i in range(3):
        pool.record(i, 0, 0.0)
    assert not should_retrigger(pool, [0.1, 0.2])
    assert should_retrigger(pool, [0.6, 0.2])
    pool.total_retriggers = pool.max_iter
    assert not should_retrigger(pool, [0.9, 0.9])


def test_pool_only_holds_failures():
    pool = FeedbackPool(tau_correct=0.85)
    assert pool.record(1, 0, 0.85)
    assert not pool.record(2, 0, 0.9)
    pool.record(1, 0, 1.0)
    assert len(pool) == 0
    pool.record(3, 1, 0.0)
    pool.expel(3, "budget exhausted")
    assert pool.expelled == {3: "budget exhausted"} and len(pool) == 0


def test_worst_shard_ties_lowest():
    assert worst_shard([0.9, 0.1]) == 0
    assert worst_shard([0.3, 0.7, 0.7]) == 1
    with pytest.raises(ValueError):
        worst_shard([])


def test_reinit_support_and_size(rng):
    W = rng.normal(size=(6, 5))
    s = ShardState(0, W + 1.0, np.ones_like(W), {1, 2})
    new = reinit_shard(s, W, 0.3, 0.01, rng)
    d = new.W_prime - W
    assert np.all(d[new.mask == 0] == 0) and not new.assigned_samples
    assert l2_norm(d) <= 0.01 * l2_norm(np.ones_like(W)) * 5


def test_retrigger_prunes_argmax_and_clears():
    W = np.zeros((2, 2))
    shards = init_shards(W, 2, 1.0, 0)
    shards[0].assigned_samples = {5}
    pool = FeedbackPool()
    pool.record(7, 0, 0.0)
    calls = []

    def retrain(j, ids):
        calls.append((j, ids))

    rep = retrigger(pool, shards, [0.9, 0.1], retrain, lambda: {5: (0, 1.0), 7: (0, 1.0)},
                    lambda s: ShardState(s.id, W.copy(), s.mask))
    assert rep.pruned_shard == 0 and calls == [(0, [5, 7])]
    assert rep.cleared == 1 and len(pool) == 0 and pool.retrigger_count == {0: 1}
    with pytest.raises(ValueError):
        retrigger(pool, [], [], retrain, dict, lambda s: s)


def test_finite_time_examples():
    assert finite_time_bound(0.9, 0.5, 0.1) == 4
    assert finite_time_bound(0.4, 0.5, 0.1) == 0
    assert finite_time_bound(0.93, 0.5, 0.1) == 5
    with pytest.raises(ValueError):
        finite_time_bound(0.9, 0.5, 0.0)


@given(st.floats(0.0, 1.0), st.floats(0.01, 1.0), st.floats(0.005, 0.5), st.floats(0.0, 2.0),
       st.integers(0, 1000))
def test_delta_process_hits_threshold_in_time(r0, tau, delta, slack, seed):
    traj = simulate_delta_process(r0, tau, delta, np.random.default_rng(seed), slack)
    assert traj[-1] <= Fraction(tau)
    assert len(traj) - 1 <= finite_time_bound(r0, tau, delta)
    assert piecewise_linear_bound_holds(traj, tau, delta)


def test_trust_weight_examples():
    assert np.allclose(trust_weights([1.0, 1.0, 1.0], 2.0), 1 / 3)
    assert np.allclose(trust_weights([0.0, 5.0], 0.0), 0.5)
    assert np.allclose(trust_weights([0.0, math.log(2)], 1.0), [2 / 3, 1 / 3])
    assert np.all(np.isfinite(trust_weights([0.0, 1e6], 1e3)))
    with pytest.raises(ValueError):
        trust_weights([np.nan], 1.0)
    with pytest.raises(ValueError):
        MergeConfig(alpha=np.inf)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=6), st.floats(0.01, 5))
def test_trust_weights_properties(losses, alpha):
    w = trust_weights(losses, alpha)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w > 0)
    order = np.argsort(losses, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-15)


def test_ties_examples():
    W = np.zeros((1, 1))
    m, _ = ties_merge([np.array([[0.2]]), np.array([[0.1]])], [0.6, 0.4], W)
    assert m[0, 0] == pytest.approx(0.16)
    m, rep = ties_merge([np.array([[0.5]]), np.array([[-0.4]])], [0.3, 0.5], W)
    assert m[0, 0] == -0.4 and rep.conflict == 1
    W = np.arange(6.0).reshape(2, 3)
    m, _ = ties_merge([np.zeros_like(W)] * 2, [0.5, 0.5], W)
    assert np.array_equal(m, W)
    with pytest.raises(ShapeError):
        ties_merge([np.zeros((2, 2))], [1.0], W)


def test_ties_zeros_are_sign_neutral():
    assert resolve_coordinate([0.0, -0.3, 0.0], [0.2, 0.3, 0.5]) == pytest.approx(-0.09)


@given(st.integers(0, 10_000))
def test_ties_matches_oracle_and_single_shard(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    W = rng.normal(size=(6, 7))
    deltas = [rng.normal(size=W.shape) * (rng.random(W.shape) < 0.5) for _ in range(k)]
    w = trust_weights(rng.uniform(0, 2, size=k), 1.0)
    assert merge_oracle_check(deltas, w, W, 200, seed)
    m, _ = ties_merge(deltas[:1], [0.7], W)
    assert np.array_equal(m, W + 0.7 * deltas[0])


@given(st.integers(0, 10_000))
def test_ties_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 4))
    deltas = [rng.normal(size=W.shape) for _ in range(3)]
    w = trust_weights(rng.uniform(0, 2, size=3), 1.0)
    p = rng.permutation(3)
    a, _ = ties_merge(deltas, w, W)
    b, _ = ties_merge([deltas[i] for i in p], w[p], W)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_disjoint_supports_merge_to_weighted_union(rng):
    W = rng.normal(size=(4, 4))
    m1 = rng.random(W.shape) < 0.5
    d1, d2 = rng.normal(size=W.shape) * m1, rng.normal(size=W.shape) * ~m1
    merged, rep = ties_merge([d1, d2], [0.3, 0.7], W)
    assert np.allclose(merged, W + 0.3 * d1 + 0.7 * d2) and rep.conflict == 0


def test_post_merge_reset(rng):
    W = rng.normal(size=(5, 3))
    shards = [ShardState(0, W + 1, np.ones_like(W), {1}, 0.3, 4)]
    out = post_merge_reset(shards, W, 0.2, rng)
    assert np.array_equal(out[0].W_prime, W) and not out[0].assigned_samples
    assert all_scores(rng.normal(size=5), out, W) == [0.0]
