"""Property suite for the masked-update, distillation, feedback, merge and metric invariants.

Every check returns a :class:`CheckResult`; :func:`run_all` runs them in a
fixed order and :func:`format_table` renders the pass/fail table printed by
``repair verify``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .distill import KDConfig, kd_loss, kd_loss_grad, smoothness_bound, sphere_rgd_converge
from .feedback import finite_time_bound, piecewise_linear_bound_holds, simulate_delta_process
from .merge import merge_oracle_check, ties_merge, trust_weights
from .numeric import grad_check
from .sidememory import (RoutingMarginConfig, ShardState, margin_loss_and_grad, masked_update,
                         overlap_inner_product_check, sample_mask, update_norm_ok)
from .toylm import ModelState, ce_from_cache, init_model, teacher_forced


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def check_norm_bound(trials: int = 10_000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        bad = 0
        for _ in range(trials):
            shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            rho = float(rng.uniform(0.01, 1.0))
            eta = float(10.0 ** rng.uniform(-4, 1))
            g = rng.normal(size=shape) * 10.0 ** rng.uniform(-3, 3)
            # a zero base makes the returned matrix the update itself, free of cancellation
            s = ShardState(0, np.zeros(shape), sample_mask(shape, rho, rng))
            bad += not update_norm_ok(masked_update(s, g, eta).W_prime, g, eta)
        return bad == 0, f"{trials} triples, {bad} violations"
    return _timed("masked-update norm bound", run)


def check_overlap_scaling(rhos: Sequence[float] = (0.2, 0.5, 0.8), trials: int = 100_000,
                          seed: int = 0, tol: float = 0.01) -> CheckResult:
    def run():
        parts, ok = [], True
        for k, rho in enumerate(rhos):
            est, ref = overlap_inner_product_check(rho, trials, [seed, k])
            ok &= abs(est - ref) <= tol
            parts.append(f"rho={rho}: {est:.4f} vs {ref:.4f}")
        return ok, "; ".join(parts)
    return _timed("rho^2 overlap scaling", run)


def check_finite_time(seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        cases = bad = 0
        for r0 in (0.3, 0.55, 0.8, 1.0):
            for tau in (0.05, 0.2, 0.5):
                for delta in (0.01, 0.05, 0.1, 0.3):
                    for slack in (0.0, 0.5):
                        traj = simulate_delta_process(r0, tau, delta, rng, slack)
                        steps = len(traj) - 1
                        cases += 1
                        bad += not (traj[-1] <= tau and steps <= finite_time_bound(r0, tau, delta)
                                    and piecewise_linear_bound_holds(traj, tau, delta))
        return bad == 0, f"{cases} processes, {bad} exceeded N*"
    return _timed("finite-time re-trigger bound", run)


# far below any tolerance checked here, far above the rounding floor of the loss (~1e-31)
STOP_TOL = 1e-24


def check_sphere_rgd(seeds: int = 20, m: int = 4, d: int = 3, steps: int = 5000,
                     seed: int = 0) -> CheckResult:
    def run():
        cfg = KDConfig(lambda_cos=1.0, theta_var=1.0, eps_cons=0.5)
        eta = 1.0 / smoothness_bound(m, cfg)
        worst_cos, worst_loss, monotone = 1.0, 0.0, True
        for s in range(seed, seed + seeds):
            u = np.random.default_rng([s, 7]).normal(size=d)
            O, loss, hist = sphere_rgd_converge(u, m, steps, eta, cfg, seed=s, tol=STOP_TOL)
            monotone &= all(b <= a for a, b in zip(hist, hist[1:]))
            worst_cos = min(worst_cos, float(np.min(O @ (u / np.linalg.norm(u)))))
            worst_loss = max(worst_loss, loss)
        ok = monotone and worst_cos > 1 - 1e-6 and worst_loss < 1e-6
        return ok, f"{seeds} seeds, monotone={monotone}, min cos={worst_cos:.10f}, max loss={worst_loss:.2e}"
    return _timed("sphere RGD convergence", run)


def check_zero_variance(seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        cfg = KDConfig(lambda_cos=1.0, theta_var=1.0, eps_cons=0.5)
        worst_zero, min_pert = 0.0, math.inf
        for _ in range(50):
            d, m = int(rng.integers(2, 10)), int(rng.integers(2, 8))
            x = rng.normal(size=d)
            scales = rng.uniform(0.1, 10.0, size=m)
            worst_zero = max(worst_zero, abs(kd_loss(np.outer(scales, x), cfg)[0]))
            X = np.tile(x, (m, 1))
            X[int(rng.integers(m))] += 1e-3 * rng.normal(size=d)
            min_pert = min(min_pert, kd_loss(X, cfg)[0])
        ok = worst_zero <= 1e-12 and min_pert > 0
        return ok, f"equal batches max |L|={worst_zero:.1e}, perturbed min L={min_pert:.2e}"
    return _timed("zero-variance minimizer", run)


def _random_model(rng: np.random.Generator) -> ModelState:
    return init_model(int(rng.integers(6, 12)), int(rng.integers(3, 6)), int(rng.integers(3, 7)),
                      seed=int(rng.integers(1 << 30)))


def check_gradients(instances: int = 50, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = {"edit": 0.0, "kd": 0.0, "act": 0.0}
        for _ in range(instances):
            model = _random_model(rng)
            V = model.W_v
            prompt = rng.integers(1, model.vocab_size, size=int(rng.integers(1, 4))).tolist()
            target = rng.integers(1, model.vocab_size, size=int(rng.integers(1, 3))).tolist()
            tf = teacher_forced(model, prompt, target)
            worst["edit"] = max(worst["edit"], grad_check(
                lambda W: ce_from_cache(model, tf, W, with_grad=True), V))

            cfg = KDConfig(float(rng.uniform(0.1, 2)), float(rng.uniform(0.1, 2)), 0.5)
            X = rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(2, 6))))
            worst["kd"] = max(worst["kd"], grad_check(lambda Y: kd_loss_grad(Y, cfg), X))

            n = int(rng.integers(1, 4))
            E = rng.normal(size=(n, V.shape[0]))
            I = rng.normal(size=(n, V.shape[0]))
            delta = rng.normal(size=V.shape)
            # scales chosen so each hinge is active and away from its kink
            mcfg = RoutingMarginConfig(gamma1=0.1, gamma2=1e3, gamma=1e3)
            worst["act"] = max(worst["act"], grad_check(
                lambda D: margin_loss_and_grad(E, I, D, mcfg), delta))
        ok = all(v <= tol for v in worst.values())
        return ok, ", ".join(f"{k} max|err|={v:.1e}" for k, v in worst.items())
    return _timed("analytic gradients vs finite differences", run)


def check_ties_oracle(configs: int = 20, samples: int = 50, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        ok = True
        for c in range(configs):
            k = int(rng.integers(1, 5))
            shape = (int(rng.integers(2, 12)), int(rng.integers(2, 12)))
            W = rng.normal(size=shape)
            deltas = [rng.normal(size=shape) * (rng.random(shape) < 0.6) for _ in range(k)]
            w = trust_weights(rng.uniform(0, 3, size=k), float(rng.uniform(0.1, 3)))
            ok &= merge_oracle_check(deltas, w, W, samples, [seed, c])
            merged, _ = ties_merge(deltas[:1], [1.0], W)
            ok &= bool(np.array_equal(merged, W + 1.0 * deltas[0]))
        return ok, f"{configs * samples} sampled coordinates over {configs} configurations"
    return _timed("TIES merge oracle", run)


def check_metric_identities(seed: int = 0) -> CheckResult:
    from .harness.metrics import compute_ppl, overall

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(1000):
            r, g, l = rng.random(3)
            worst = max(worst, abs(overall(r, g, l) - (r * g * l) ** (1.0 / 3.0)))
        zero_ok = overall(0.0, 0.7, 1.0) == 0.0
        V = 37
        model = init_model(V, 4, 5, seed=seed)
        model.unembed[:] = 0.0      # every logit 0: the uniform model
        pairs = [(rng.integers(1, V, size=3).tolist(), rng.integers(1, V, size=2).tolist())
                 for _ in range(5)]
        ppl = compute_ppl(model, [], model.W_v, 0.0, pairs)
        ok = worst <= 1e-12 and zero_ok and abs(ppl - V) <= 1e-9
        return ok, f"OP max|err|={worst:.1e}, uniform PPL={ppl!r} (V={V})"
    return _timed("metric identities", run)


CHECKS = (check_norm_bound, check_overlap_scaling, check_finite_time, check_sphere_rgd,
          check_zero_variance, check_gradients, check_ties_oracle, check_metric_identities)


def run_all(seed: int = 0) -> List[CheckResult]:
    return [check(seed=seed) for check in CHECKS]


def format_table(results: Sequence[CheckResult], timings: bool = False) -> str:
    """Fixed-width table; without ``timings`` it is identical across runs."""
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  " + ("seconds  " if timings else "") + "detail"]
    for r in results:
        secs = f"{r.seconds:7.2f}  " if timings else ""
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {secs}{r.detail}")
    return "\n".join(lines)
