import numpy as np
import pytest
from hypothesis import given, strategies as st

from repair_edit.distill import (Batch, KDConfig, ResidualPool, filter_and_recluster, form_batches,
                                 kd_loss, kd_loss_grad, smoothness_bound, soft_kd, sphere_kd_loss,
                                 sphere_rgd_converge)
from repair_edit.numeric import grad_check, numerical_grad


def cfg(lam=1.0, var=1.0, eps=0.5, T=0.0, b=4):
    return KDConfig(lam, var, eps, T, b)


def test_kd_examples():
    same = np.tile([1.0, 2.0, 3.0], (4, 1))
    assert abs(kd_loss(same, cfg())[0]) <= 1e-15
    orth = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert kd_loss(orth, cfg(1.0, 0.0))[0] == pytest.approx(1.0, abs=1e-15)
    assert kd_loss(orth, cfg(0.0, 1.0))[0] == pytest.approx(0.5, abs=1e-15)


def test_kd_rejects_zero_feature_and_tiny_batch():
    with pytest.raises(ValueError):
        kd_loss(np.array([[1.0, 0.0], [0.0, 0.0]]), cfg())
    with pytest.raises(ValueError):
        kd_loss(np.array([[1.0, 0.0]]), cfg())


@given(st.integers(0, 10_000))
def test_kd_invariant_to_student_order(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 4))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    a, pa = kd_loss(X, cfg())
    b, pb = kd_loss(X[perm], cfg())
    assert a == pytest.approx(b, rel=1e-12)
    assert np.allclose(pa[perm[1:] - 1], pb)


@given(st.integers(0, 10_000))
def test_zero_variance_both_directions(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=3)
    X = np.outer(rng.uniform(0.1, 5.0, size=4), x)
    assert abs(kd_loss(X, cfg())[0]) <= 1e-12
    X[2] += 0.01 * rng.normal(size=3)
    assert kd_loss(X, cfg())[0] > 0


def test_kd_grad_fd(rng):
    for _ in range(10):
        X = rng.normal(size=(int(rng.integers(2, 6)), 4))
        assert grad_check(lambda Y: kd_loss_grad(Y, cfg(0.7, 1.3)), X) < 1e-5


def test_soft_kd_grad_fd(rng):
    Z = rng.normal(size=(3, 5))
    _, g = soft_kd(Z, 2.0)
    num = numerical_grad(lambda z: soft_kd(np.vstack([Z[0], z[1:]]), 2.0)[0], Z)
    assert np.max(np.abs(num[1:] - g[1:])) < 1e-7
    assert np.all(g[0] == 0)


def test_soft_kd_added_when_enabled(rng):
    X, Z = rng.normal(size=(3, 4)), rng.normal(size=(3, 6))
    base = kd_loss(X, cfg())[0]
    assert kd_loss(X, cfg(T=2.0), logits=Z)[0] == pytest.approx(base + soft_kd(Z, 2.0)[0])


def test_form_batches_identical_pairs():
    feats = {i: np.array([1.0, 0.0]) for i in range(4)}
    batches, left = form_batches(feats, 2)
    assert [b.members for b in batches] == [[0, 1], [2, 3]] and left == []


def brute_force_medoid_split(X):
    """Best split of 6 points into two triples by total within-triple cosine."""
    from itertools import combinations
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    best, best_val = None, -np.inf
    for c in combinations(range(6), 3):
        if 0 not in c:
            continue
        rest = tuple(i for i in range(6) if i not in c)
        val = sum(U[i] @ U[j] for grp in (c, rest) for i in grp for j in grp)
        if val > best_val:
            best, best_val = {frozenset(c), frozenset(rest)}, val
    return best


def test_form_batches_two_clusters(rng):
    centers = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    X = np.vstack([centers[i // 3] + 0.05 * rng.normal(size=3) for i in range(6)])
    order = rng.permutation(6)
    feats = {int(k): X[k] for k in order}
    batches, left = form_batches(feats, 3)
    assert left == []
    assert {frozenset(b.members) for b in batches} == brute_force_medoid_split(X)


def test_form_batches_leftover_and_degenerate():
    feats = {i: np.array([np.cos(i), np.sin(i)]) for i in range(5)}
    batches, left = form_batches(feats, 2)
    assert len(batches) == 2 and len(left) == 1
    batches, left = form_batches({7: np.array([1.0, 0.0])}, 2)
    assert batches == [] and left == [7]


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(2, 5))
def test_form_batches_is_a_partition(seed, n, b):
    rng = np.random.default_rng(seed)
    feats = {int(i): rng.normal(size=3) for i in rng.permutation(40)[:n]}
    batches, left = form_batches(feats, b)
    seen = [m for bt in batches for m in bt.members] + list(left)
    assert sorted(seen) == sorted(feats)
    assert all(2 <= len(bt) <= b for bt in batches)
    for bt in batches:
        for f in bt.features.values():
            assert abs(np.linalg.norm(f) - 1.0) < 1e-9


def batch(teacher, students):
    return Batch(teacher, list(students), {})


def test_filter_boundary_inclusive():
    res = ResidualPool()
    kept, _ = filter_and_recluster([batch(0, [1, 2])], {1: 0.5, 2: 0.49}, cfg(eps=0.5), res)
    assert kept[0].members == [0, 2] and 1 in res


def test_filter_noop_and_dissolve():
    res = ResidualPool()
    kept, _ = filter_and_recluster([batch(0, [1])], {1: 0.1}, cfg(eps=0.5), res)
    assert kept[0].members == [0, 1] and len(res) == 0
    kept, _ = filter_and_recluster([batch(0, [1])], {1: 0.9}, cfg(eps=0.5), res)
    assert kept == [] and 0 in res and 1 in res


@given(st.dictionaries(st.integers(1, 9), st.floats(0, 1), min_size=1))
def test_filter_never_loses_samples(losses):
    res = ResidualPool()
    b = batch(0, sorted(losses))
    kept, _ = filter_and_recluster([b], losses, cfg(eps=0.5), res)
    out = [m for k in kept for m in k.members] + res.pop_all()
    assert sorted(out) == sorted(b.members)


def test_residual_rounds_count():
    res = ResidualPool()
    res.add(3, 0.7)
    res.pop_all()
    res.add(3, 0.8)
    assert res.rounds[3] == 2 and 3 in res


def test_sphere_rgd_fixed_point_and_convergence():
    c = cfg()
    u = np.array([0.0, 0.0, 1.0])
    eta = 1.0 / smoothness_bound(4, c)
    O, loss, hist = sphere_rgd_converge(u, 4, 100, eta, c, seed=0, init=np.tile(u, (4, 1)))
    assert loss == 0.0 and len(hist) == 1
    O, loss, hist = sphere_rgd_converge(u, 4, 5000, eta, c, seed=1, tol=1e-24)
    assert np.all(O @ u > 1 - 1e-6) and loss < 1e-6
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert sphere_kd_loss(O, u, c) == loss


def test_sphere_rgd_rejects_step():
    c = cfg()
    with pytest.raises(ValueError):
        sphere_rgd_converge(np.ones(3), 4, 10, 2.0 / smoothness_bound(4, c), c, seed=0)
