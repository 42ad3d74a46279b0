"""Self-contained invariant suites behind ``hjb-linf check``.

The finite-difference references here only call the plain forward pass, so a
broken jet or adjoint shows up as a mismatch rather than agreeing with itself.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .evaluation import estimate_lp_norm, relative_errors
from .jet import MlpParams, forward_jet, forward_value, init_network
from .problems import (
    CostSpec,
    exact_linear_network,
    linear_solution_hjb,
    lqg_exact_batch,
    lqg_problem,
    lqg_terminal,
    recover_optimal_control,
)
from .rng import stream
from .sampling import CollocationBatch
from .trainer import TrainConfig, loss_terms


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def rel_err(a, b) -> float:
    """Worst component-wise error relative to max(|b|, 1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def fd_jet(params: MlpParams, x, t, h: float = 1e-4):
    """Central-difference value, time partial, spatial gradient and Laplacian at one point."""
    x = np.asarray(x, dtype=float)
    n = x.size
    u0 = forward_value(params, x, t)
    grad = np.empty(n)
    lap = 0.0
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        up, um = forward_value(params, x + e, t), forward_value(params, x - e, t)
        grad[i] = (up - um) / (2 * h)
        lap += (up - 2 * u0 + um) / h**2
    dt = (forward_value(params, x, t + h) - forward_value(params, x, t - h)) / (2 * h)
    return u0, dt, grad, lap


def fd_param_grad(params: MlpParams, loss_of_params: Callable, h: float = 1e-5):
    vec = params.to_vector()
    out = np.empty_like(vec)
    for k in range(vec.size):
        vp = vec.copy()
        vp[k] += h
        vm = vec.copy()
        vm[k] -= h
        out[k] = (loss_of_params(params.with_vector(vp)) - loss_of_params(params.with_vector(vm))) / (2 * h)
    return out


def random_network(seed: int, max_n: int = 8, max_width: int = 32):
    """A small random tanh net with non-zero biases, plus its spatial dimension."""
    rng = stream(seed, "check")
    n = int(rng.integers(1, max_n + 1))
    depth = int(rng.integers(1, 4))
    width = int(rng.integers(2, max_width + 1))
    base = init_network([n + 1] + [width] * depth + [1], seed)
    biases = tuple(b + rng.normal(scale=0.3, size=b.shape) for b in base.biases)
    return MlpParams(base.weights, biases), n, rng


def _lqg_sq(params, x, t, mu=1.0):
    jet = forward_jet(params, x, t)
    r = jet.time_partial + jet.laplacian - mu * np.sum(jet.spatial_grad**2, axis=-1)
    return float(np.mean(r**2))


def jet_fd_suite(seeds=range(20), tol_jet=1e-6, tol_grad=1e-4, n_points=3) -> CheckResult:
    worst_jet = worst_grad = 0.0
    for seed in seeds:
        params, n, rng = random_network(seed)
        x = rng.normal(size=(n_points, n))
        t = rng.uniform(size=n_points)
        jet = forward_jet(params, x, t)
        for k in range(n_points):
            ref = fd_jet(params, x[k], t[k])
            got = (jet.value[k], jet.time_partial[k], jet.spatial_grad[k], jet.laplacian[k])
            worst_jet = max(worst_jet, max(rel_err(g, r) for g, r in zip(got, ref)))
        prob = lqg_problem(n)
        batch = CollocationBatch(x, t, rng.normal(size=(n_points, n)))
        cfg = TrainConfig(M=1, lam=1.0)
        g = loss_terms(params, batch, prob, cfg).grad.to_vector()

        def total(q):
            bv = forward_value(q, batch.boundary_x, np.full(n_points, prob.T))
            return _lqg_sq(q, x, t, prob.mu) + float(np.mean((bv - lqg_terminal(batch.boundary_x)) ** 2))
        worst_grad = max(worst_grad, rel_err(g, fd_param_grad(params, total)))
    ok = worst_jet <= tol_jet and worst_grad <= tol_grad
    return CheckResult("jet-vs-finite-differences", ok,
                       f"jet err {worst_jet:.2e} (tol {tol_jet:g}), param-grad err {worst_grad:.2e} (tol {tol_grad:g})")


def exact_solution_suite(ns=(4, 100), cs=(1.25, 1.5, 1.75)) -> CheckResult:
    worst_loss = worst_grad = worst_metric = 0.0
    for n in ns:
        net = exact_linear_network(n)
        for c in cs:
            prob = linear_solution_hjb(n, c)
            rng = stream(n, "check", int(100 * c))
            batch = CollocationBatch(rng.normal(size=(64, n)), rng.uniform(size=64), rng.normal(size=(64, n)))
            terms = loss_terms(net, batch, prob, TrainConfig(M=1, K=0))
            m = relative_errors(net, prob, S=500, seed=n)
            worst_loss = max(worst_loss, terms.loss)
            worst_grad = max(worst_grad, terms.grad.sup_norm())
            worst_metric = max(worst_metric, m.l1_rel, m.l2_rel, m.w11_rel)
    ok = worst_loss <= 1e-12 and worst_grad <= 1e-6 and worst_metric <= 1e-10
    return CheckResult("exact-solution-fixed-point", ok,
                       f"loss {worst_loss:.1e}, grad {worst_grad:.1e}, metrics {worst_metric:.1e}")


def oracle_terminal_suite(n=10, count=100) -> CheckResult:
    prob = lqg_problem(n)
    x = stream(0, "check", 1).normal(size=(count, n))
    out = lqg_exact_batch(x, np.full(count, prob.T), prob, mc_samples=100, seed=0)
    err = float(np.max(np.abs(out.value - lqg_terminal(x))))
    return CheckResult("oracle-terminal-condition", err == 0.0, f"max |u*(x,T) - g(x)| = {err:.1e}")


def estimator_suite(reps=50) -> CheckResult:
    const, se0 = estimate_lp_norm(lambda X: np.ones(X.shape[0]), 16.0, 100, stream(0, "check", 2))
    f = lambda X: X[:, 0]  # noqa: E731
    se = {N: np.mean([estimate_lp_norm(f, 2.0, N, stream(s, "estimate", 1, N))[1] for s in range(reps)])
          for N in (1000, 4000)}
    ratio = se[4000] / se[1000]
    ok = const == 1.0 and se0 == 0.0 and 0.4 <= ratio <= 0.6
    return CheckResult("lp-estimator", ok, f"constant -> {const}, stderr ratio at 4N {ratio:.3f}")


def duality_suite(count=200, grid_points=100_000) -> CheckResult:
    rng = stream(0, "check", 3)
    worst = 0.0
    for _ in range(count):
        a = rng.uniform(0.2, 3.0)
        alpha = rng.uniform(1.2, 3.0)
        p = rng.uniform(-3.0, 3.0)
        y_star = float(recover_optimal_control(np.array([p]), CostSpec(np.array([a]), np.array([alpha])))[0])
        half = max(2.0 * abs(y_star), 1.0)
        ys = np.linspace(-half, half, grid_points)
        step = ys[1] - ys[0]
        y_grid = ys[np.argmin(a * np.abs(ys) ** alpha + ys * p)]
        worst = max(worst, abs(y_grid - y_star) / step)
    return CheckResult("optimal-control-duality", worst <= 1.0, f"worst gap {worst:.2f} grid steps")


def run_all(quick: bool = True) -> list:
    seeds = range(4) if quick else range(20)
    return [
        jet_fd_suite(seeds),
        exact_solution_suite(),
        oracle_terminal_suite(),
        estimator_suite(),
        duality_suite(),
    ]


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results]
    return "\n".join(lines)
