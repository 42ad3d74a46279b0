"""HJB problem instances: residuals, terminal conditions and exact solutions.

Two families are supported:

* ``LQG``: ``u_t + lap u - mu |grad u|^2 = 0`` with terminal cost
  ``g(x) = ln((1 + |x|^2) / 2)``. Its solution is a log-expectation over a
  Gaussian, evaluated here by antithetic Monte Carlo.
* ``PowerHJB``: ``u_t + sigma^2/2 lap u - sum_i A_i |d_i u|^c_i = phi(x, t)``,
  the value function of a control problem with power-law running cost.
  The member with ``sigma^2 = 2``, ``A_i = 1/n``, ``phi = -2`` and
  ``g(x) = sum x_i`` has the linear solution ``sum x_i + T - t``.

All residual functions are vectorised over a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .jet import PdeJet, ResidualPartials
from .rng import stream


class OracleValue(NamedTuple):
    value: np.ndarray
    spatial_grad: np.ndarray
    stderr: np.ndarray


def lqg_terminal(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.sum(x * x, axis=-1)) - np.log(2.0)


def lqg_terminal_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * x / (1.0 + np.sum(x * x, axis=-1, keepdims=True))


def _sum_terminal(x):
    return np.sum(np.asarray(x, dtype=np.float64), axis=-1)


def _sum_terminal_grad(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    n: int
    T: float = 1.0
    mu: float = 1.0
    sigma: float = float(np.sqrt(2.0))
    A: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    forcing_phi: Optional[Callable] = None
    terminal_g: Callable = lqg_terminal
    terminal_grad: Callable = lqg_terminal_grad
    # set only by linear_solution_hjb(); marks specs with a closed-form solution
    family: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("LQG", "PowerHJB"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.kind == "LQG":
            if not self.mu > 0:
                raise ValueError("mu must be positive")
        else:
            if not self.sigma > 0:
                raise ValueError("sigma must be positive")
            A = np.broadcast_to(np.asarray(self.A, dtype=np.float64), (self.n,)).copy()
            c = np.broadcast_to(np.asarray(self.c, dtype=np.float64), (self.n,)).copy()
            if not np.all(A > 0) or not np.all(np.isfinite(A)):
                raise ValueError("every A_i must be in (0, inf)")
            if not np.all(c > 1) or not np.all(np.isfinite(c)):
                raise ValueError("every c_i must be in (1, inf)")
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "c", c)
            if self.forcing_phi is None:
                object.__setattr__(self, "forcing_phi", lambda x, t: np.zeros(np.shape(t)))

    @property
    def has_oracle(self) -> bool:
        return self.kind == "LQG" or self.family == "linear"


def lqg_problem(n: int, mu: float = 1.0, T: float = 1.0) -> ProblemSpec:
    return ProblemSpec("LQG", n=n, T=T, mu=mu)


def linear_solution_hjb(n: int, c: float, T: float = 1.0) -> ProblemSpec:
    """Power-law HJB whose exact solution is ``sum x_i + T - t``."""
    return ProblemSpec(
        "PowerHJB", n=n, T=T, sigma=float(np.sqrt(2.0)),
        A=np.full(n, 1.0 / n), c=np.full(n, float(c)),
        forcing_phi=lambda x, t: np.full(np.shape(t), -2.0),
        terminal_g=_sum_terminal, terminal_grad=_sum_terminal_grad,
        family="linear",
    )


def lqg_residual(jet: PdeJet, mu: float):
    grad = np.asarray(jet.spatial_grad, dtype=np.float64)
    r = jet.time_partial + jet.laplacian - mu * np.sum(grad * grad, axis=-1)
    ones = np.ones_like(np.asarray(r, dtype=np.float64))
    return r, ResidualPartials(0.0 * ones, ones, -2.0 * mu * grad, ones)


def power_hjb_residual(jet: PdeJet, x, t, spec: ProblemSpec):
    grad = np.asarray(jet.spatial_grad, dtype=np.float64)
    mag = np.abs(grad)
    r = (jet.time_partial + 0.5 * spec.sigma**2 * jet.laplacian
         - np.sum(spec.A * mag**spec.c, axis=-1) - spec.forcing_phi(x, t))
    # c > 1, so the partial vanishes continuously at a zero gradient component
    d_grad = -spec.A * spec.c * mag ** (spec.c - 1.0) * np.sign(grad)
    ones = np.ones_like(np.asarray(r, dtype=np.float64))
    return r, ResidualPartials(0.0 * ones, ones, d_grad, 0.5 * spec.sigma**2 * ones)


def pde_residual(problem: ProblemSpec, jet: PdeJet, x, t):
    """Point-wise residual and its jet partials for either problem family."""
    if problem.kind == "LQG":
        return lqg_residual(jet, problem.mu)
    return power_hjb_residual(jet, x, t, problem)


def boundary_residual(value_at_T, x, spec: ProblemSpec):
    return value_at_T - spec.terminal_g(x)


def lqg_oracle_from_samples(x, t, spec: ProblemSpec, y) -> OracleValue:
    """Monte-Carlo solution at points ``x`` (``(B, n)``) from standard normal draws ``y``.

    Each row of ``y`` is used together with its negation. The same draws are
    shared by every point, so neighbouring estimates are smooth in ``x``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    y = np.asarray(y, dtype=np.float64)
    mu = spec.mu
    s = np.sqrt(2.0 * (spec.T - t))[:, None]
    xx = np.sum(x * x, axis=1)[:, None]
    yy = np.sum(y * y, axis=1)[None, :]
    xy = x @ y.T
    values = np.empty(x.shape[0])
    grads = np.empty_like(x)
    errs = np.empty(x.shape[0])
    m = y.shape[0]
    # 1 + |x - s y|^2 and 1 + |x + s y|^2
    base = 1.0 + xx + s * s * yy
    qp = base - 2.0 * s * xy
    qm = base + 2.0 * s * xy
    wp = (0.5 * qp) ** (-mu)
    wm = (0.5 * qm) ** (-mu)
    pair = 0.5 * (wp + wm)
    mean_w = pair.mean(axis=1)
    values[:] = -np.log(mean_w) / mu
    if m > 1:
        se = pair.std(axis=1, ddof=1) / np.sqrt(m)
        errs[:] = se / (mu * mean_w)
    else:
        errs[:] = np.inf
    # E[w grad g(x - s y)] with grad g(z) = 2 z / (1 + |z|^2)
    kp = wp / qp
    km = wm / qm
    ksum = (kp + km).sum(axis=1)[:, None]
    kdiff = kp - km
    num = 2.0 * (x * ksum - s * (kdiff @ y))
    grads[:] = num / (2.0 * m * mean_w[:, None])
    return OracleValue(values, grads, errs)


def lqg_exact(x, t, spec: ProblemSpec, mc_samples: int, seed: int) -> OracleValue:
    """Value and spatial gradient of the LQG solution at a single point ``(x, t)``."""
    if spec.kind != "LQG":
        raise ValueError("lqg_exact needs an LQG problem")
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= t <= spec.T:
        raise ValueError(f"t={t} outside [0, {spec.T}]")
    if t == spec.T:
        return OracleValue(float(lqg_terminal(x)), lqg_terminal_grad(x), 0.0)
    if mc_samples < 2:
        raise ValueError("need at least 2 Monte-Carlo samples (one antithetic pair)")
    y = stream(seed, "oracle", 0).standard_normal((mc_samples // 2, spec.n))
    out = lqg_oracle_from_samples(x[None, :], t, spec, y)
    return OracleValue(float(out.value[0]), out.spatial_grad[0], float(out.stderr[0]))


def lqg_exact_batch(x, t, spec: ProblemSpec, mc_samples: int, seed: int, chunk: int = 256) -> OracleValue:
    """Oracle on many points with one shared (common random number) sample set.

    Points with ``t == T`` are returned exactly from the terminal cost.
    """
    if spec.kind != "LQG":
        raise ValueError("lqg_exact_batch needs an LQG problem")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if np.any(t < 0) or np.any(t > spec.T):
        raise ValueError("t outside [0, T]")
    if mc_samples < 2:
        raise ValueError("need at least 2 Monte-Carlo samples (one antithetic pair)")
    y = stream(seed, "oracle", 0).standard_normal((mc_samples // 2, spec.n))
    vals = np.empty(x.shape[0])
    grads = np.empty_like(x)
    errs = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        out = lqg_oracle_from_samples(x[sl], t[sl], spec, y)
        vals[sl], grads[sl], errs[sl] = out
    at_T = t == spec.T
    if np.any(at_T):
        vals[at_T] = lqg_terminal(x[at_T])
        grads[at_T] = lqg_terminal_grad(x[at_T])
        errs[at_T] = 0.0
    return OracleValue(vals, grads, errs)


def power_hjb_exact(x, t, spec: ProblemSpec) -> OracleValue:
    if spec.kind != "PowerHJB" or spec.family != "linear":
        raise ValueError("no closed-form solution known for this problem")
    if not (np.isclose(spec.sigma**2, 2.0) and np.allclose(spec.A, 1.0 / spec.n)
            and np.all(spec.c == spec.c[0])):
        raise ValueError("problem parameters are outside the linear-solution family")
    x = np.asarray(x, dtype=np.float64)
    value = np.sum(x, axis=-1) + spec.T - np.asarray(t, dtype=np.float64)
    return OracleValue(value, np.ones_like(x), np.zeros_like(value))


def exact_solution(problem: ProblemSpec, x, t, mc_samples: int = 10_000, seed: int = 0) -> OracleValue:
    """Batched oracle for any problem that has one."""
    if problem.kind == "LQG":
        return lqg_exact_batch(x, t, problem, mc_samples, seed)
    return power_hjb_exact(x, t, problem)


@dataclass(frozen=True)
class CostSpec:
    a: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if a.shape != alpha.shape:
            raise ValueError("a and alpha must have the same length")
        if not np.all(a > 0):
            raise ValueError("every a_i must be positive")
        if not np.all(alpha > 1):
            raise ValueError("every alpha_i must exceed 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "alpha", alpha)


def cost_to_hjb_coeffs(cost: CostSpec):
    """Map the running cost ``sum a_i |y_i|^alpha_i`` to ``(A, c)`` of the HJB equation."""
    a, al = cost.a, cost.alpha
    aa = a * al
    A = aa ** (-1.0 / (al - 1.0)) - a * aa ** (-al / (al - 1.0))
    c = al / (al - 1.0)
    return A, c


def recover_optimal_control(spatial_grad, cost: CostSpec):
    """Minimiser of ``a_i |y|^alpha_i + y d_i u`` for each component."""
    p = np.asarray(spatial_grad, dtype=np.float64)
    mag = (np.abs(p) / (cost.a * cost.alpha)) ** (1.0 / (cost.alpha - 1.0))
    return -np.sign(p) * mag


def exact_linear_network(n: int, T: float = 1.0):
    """Single affine layer computing ``sum x_i + T - t`` exactly."""
    from .jet import MlpParams

    w = np.ones((1, n + 1))
    w[0, n] = -1.0
    return MlpParams((w,), (np.array([float(T)]),))
