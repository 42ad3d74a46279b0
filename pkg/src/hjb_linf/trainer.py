"""Min-max training: sign-gradient attacks on collocation points, Adam on weights.

Each iteration draws a fresh batch, moves the domain and boundary points
towards larger squared residuals with ``K`` projected sign-gradient steps,
and then takes one Adam step on the mean squared residuals at the moved
points. With ``K = 0`` (or ``loss_mode="l2"``) this is ordinary PINN
training; ``loss_mode="lp"`` minimises the mean ``|r|^p`` directly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .jet import (
    DivergenceError,
    MlpParams,
    ParamGrad,
    ResidualPartials,
    forward_jet,
    jet_input_grad,
    loss_param_grad,
    value_input_grad,
)
from .problems import ProblemSpec, boundary_residual, pde_residual
from .rng import stream
from .sampling import CollocationBatch, sample_batch

log = logging.getLogger(__name__)

LOSS_MODES = ("adversarial", "l2", "lp")


@dataclass
class TrainConfig:
    M: int = 5000
    K: int = 20
    eta: float = 0.05
    lam: float = 1.0
    N1: int = 100
    N2: int = 100
    lr0: float = 7e-4
    lr_schedule: str = "linear_to_zero"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_mode: str = "adversarial"
    p: float = 2.0  # exponent for loss_mode="lp"
    attack_domain: bool = True
    attack_boundary: bool = True
    attack_time: bool = True
    attack_grad: str = "exact"  # "exact" (adjoint) or "fd"
    fd_step: float = 1e-3
    x_clamp_radius: Optional[float] = None

    def __post_init__(self):
        errors = []
        if self.M < 1:
            errors.append("M must be >= 1")
        if self.K < 0:
            errors.append("K must be >= 0")
        if not self.eta > 0:
            errors.append("eta must be > 0")
        if self.lam < 0:
            errors.append("lambda must be >= 0")
        if self.N1 < 1 or self.N2 < 1:
            errors.append("N1 and N2 must be >= 1")
        if not self.lr0 > 0:
            errors.append("lr0 must be > 0")
        if self.lr_schedule != "linear_to_zero":
            errors.append(f"unsupported lr_schedule {self.lr_schedule!r}")
        if not 0 < self.adam_beta1 < self.adam_beta2 < 1:
            errors.append("need 0 < adam_beta1 < adam_beta2 < 1")
        if not self.adam_eps >= 0:
            errors.append("adam_eps must be >= 0")
        if self.seed < 0:
            errors.append("seed must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            errors.append(f"loss_mode must be one of {LOSS_MODES}")
        if self.loss_mode == "lp":
            if self.p < 2:
                errors.append("lp mode needs p >= 2")
            if self.attack_domain or self.attack_boundary:
                errors.append("lp mode requires attack_domain and attack_boundary off")
        if self.attack_grad not in ("exact", "fd"):
            errors.append("attack_grad must be 'exact' or 'fd'")
        if not self.fd_step > 0:
            errors.append("fd_step must be > 0")
        if self.x_clamp_radius is not None and not self.x_clamp_radius > 0:
            errors.append("x_clamp_radius must be positive when set")
        if errors:
            raise ValueError("; ".join(errors))

    def lr_at(self, i: int) -> float:
        return self.lr0 * (1.0 - i / self.M)


class TraceRow(NamedTuple):
    iteration: int
    domain_loss: float
    boundary_loss: float
    lr: float
    post_attack_residual_sq: float


@dataclass
class RunRecord:
    config: dict
    trace: list = field(default_factory=list)
    params: Optional[MlpParams] = None
    metrics: Optional[object] = None
    duration_s: float = 0.0
    abort_reason: Optional[str] = None
    abort_iteration: Optional[int] = None
    attack_faults: int = 0

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None


# -- attack -----------------------------------------------------------------

def sign_ascent(z, objective_grad, eta, K, project, frozen=None, step_mask=None):
    """``K`` steps of ``z <- project(z + eta * sign(grad))``.

    ``objective_grad(z)`` returns ``(values, grads)`` per row. Rows whose
    objective or gradient turns non-finite are frozen at their last finite
    position. Returns the moved points and the number of newly frozen rows.
    """
    z = np.array(z, dtype=np.float64, copy=True)
    frozen = np.zeros(z.shape[0], dtype=bool) if frozen is None else frozen.copy()
    faults = 0
    for _ in range(K):
        vals, grads = objective_grad(z)
        bad = ~np.isfinite(vals) | ~np.all(np.isfinite(grads), axis=1)
        faults += int(np.sum(bad & ~frozen))
        frozen |= bad
        step = eta * np.sign(np.where(np.isfinite(grads), grads, 0.0))
        if step_mask is not None:
            step = step * step_mask
        step[frozen] = 0.0
        z = project(z + step)
    return z, faults


def _project_x(x, radius):
    if radius is None:
        return x
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
    return x * scale


def _squared_residual_partials(problem):
    def partials(jet, x, t):
        r, P = pde_residual(problem, jet, x, t)
        s = 2.0 * r
        return r * r, ResidualPartials(s * P.d_value, s * P.d_time_partial,
                                       s[:, None] * P.d_spatial_grad, s * P.d_laplacian)
    return partials


def domain_objective_grad(params, problem, cfg):
    """``z -> (r(z)^2, d r^2 / dz)`` for rows ``z = (x, t)``."""
    n = problem.n
    partials = _squared_residual_partials(problem)

    def exact(z):
        with np.errstate(all="ignore"):
            return jet_input_grad(params, z[:, :n], z[:, n], partials)

    def fd(z):
        B, d = z.shape
        h = cfg.fd_step
        shifted = np.repeat(z[None], 2 * d, axis=0)
        for k in range(d):
            shifted[2 * k, :, k] += h
            shifted[2 * k + 1, :, k] -= h
        flat = np.concatenate([z, shifted.reshape(-1, d)])
        with np.errstate(all="ignore"):
            jet = forward_jet(params, flat[:, :n], flat[:, n])
            r, _ = pde_residual(problem, jet, flat[:, :n], flat[:, n])
        sq = (r * r)
        vals = sq[:B]
        sh = sq[B:].reshape(2 * d, B)
        grads = ((sh[0::2] - sh[1::2]) / (2 * h)).T
        return vals, grads

    return exact if cfg.attack_grad == "exact" else fd


def boundary_objective_grad(params, problem):
    """``x -> (b(x)^2, d b^2 / dx)`` with ``b = u(x, T) - g(x)``; first order only."""
    def f(x):
        with np.errstate(all="ignore"):
            val, g = value_input_grad(params, x, problem.T)
            b = boundary_residual(val, x, problem)
            return b * b, 2.0 * b[:, None] * (g[:, :problem.n] - problem.terminal_grad(x))
    return f


def pgd_attack(params: MlpParams, points: CollocationBatch, problem: ProblemSpec,
               cfg: TrainConfig, return_faults: bool = False):
    """Move collocation points uphill on the squared residuals.

    Domain points move in ``(x, t)`` (``t`` only when ``cfg.attack_time``),
    with ``t`` clamped to ``[0, T]``; boundary points move in ``x`` at fixed
    ``t = T``. ``x`` is clamped to the ball of radius ``cfg.x_clamp_radius``
    when that is set.
    """
    n = problem.n
    dx, dt, bx = points.domain_x, points.domain_t, points.boundary_x
    faults = 0
    if cfg.K > 0 and cfg.attack_domain:
        def project(z):
            z[:, n] = np.clip(z[:, n], 0.0, problem.T)
            z[:, :n] = _project_x(z[:, :n], cfg.x_clamp_radius)
            return z

        mask = np.ones(n + 1)
        if not cfg.attack_time:
            mask[n] = 0.0
        z0 = np.concatenate([dx, dt[:, None]], axis=1)
        z, f = sign_ascent(z0, domain_objective_grad(params, problem, cfg), cfg.eta, cfg.K,
                           project, step_mask=mask)
        dx, dt = z[:, :n], z[:, n]
        faults += f
    if cfg.K > 0 and cfg.attack_boundary:
        bx, f = sign_ascent(bx, boundary_objective_grad(params, problem), cfg.eta, cfg.K,
                            lambda x: _project_x(x, cfg.x_clamp_radius))
        faults += f
    out = CollocationBatch(dx, dt, bx)
    return (out, faults) if return_faults else out


# -- loss -------------------------------------------------------------------

class LossTerms(NamedTuple):
    loss: float
    grad: ParamGrad
    domain_loss: float
    boundary_loss: float
    domain_grad: ParamGrad
    boundary_grad: ParamGrad
    residual_sq: float


def _power_loss(res, power):
    if power == 2.0:
        return res * res, 2.0 * res
    a = np.abs(res)
    return a**power, power * a ** (power - 1.0) * np.sign(res)


def loss_terms(params: MlpParams, batch: CollocationBatch, problem: ProblemSpec, cfg: TrainConfig) -> LossTerms:
    power = cfg.p if cfg.loss_mode == "lp" else 2.0
    seen = {}

    def domain(jet, x, t):
        r, P = pde_residual(problem, jet, x, t)
        seen["r"] = r
        loss, s = _power_loss(r, power)
        return loss, ResidualPartials(s * P.d_value, s * P.d_time_partial,
                                      s[:, None] * P.d_spatial_grad, s * P.d_laplacian)

    def boundary(jet, x, t):
        b = boundary_residual(jet.value, x, problem)
        loss, s = _power_loss(b, power)
        zero = np.zeros_like(b)
        return loss, ResidualPartials(s, zero, np.zeros_like(jet.spatial_grad), zero)

    with np.errstate(over="ignore", invalid="ignore"):
        dloss, dgrad = loss_param_grad(params, batch.domain_x, batch.domain_t, domain)
        bt = np.full(batch.boundary_x.shape[0], problem.T)
        bloss, bgrad = loss_param_grad(params, batch.boundary_x, bt, boundary)
    total = dloss + cfg.lam * bloss
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss {total}")
    r = seen["r"]
    return LossTerms(total, dgrad + bgrad.scale(cfg.lam), dloss, bloss, dgrad, bgrad, float(np.mean(r * r)))


def combined_loss_and_grad(params, batch, problem, cfg):
    """``mean r^2 + lam * mean b^2`` (or the ``|.|^p`` version) and its gradient."""
    terms = loss_terms(params, batch, problem, cfg)
    return terms.loss, terms.grad


# -- optimiser ---------------------------------------------------------------

@dataclass(frozen=True)
class OptState:
    """Adam moments over the flattened parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "OptState":
        k = params.num_params
        return cls(np.zeros(k), np.zeros(k), 0)


def adam_update(state: OptState, params: MlpParams, grad: ParamGrad, lr_t: float,
                beta1=0.9, beta2=0.999, eps=1e-8):
    g = grad.to_vector()
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    denom = np.sqrt(v_hat) + eps
    # eps = 0 with a zero second moment: that coordinate has never moved
    ratio = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
    theta = params.to_vector() - lr_t * ratio
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameters after update")
    return OptState(m, v, step), params.with_vector(theta)


# -- loop -------------------------------------------------------------------

def train(problem: ProblemSpec, cfg: TrainConfig, net: MlpParams,
          on_iteration: Optional[Callable] = None) -> RunRecord:
    """Run ``cfg.M`` iterations; ``on_iteration(i, params, row)`` is called after each step."""
    if net.n_spatial != problem.n:
        raise ValueError(f"network takes n={net.n_spatial}, problem has n={problem.n}")
    record = RunRecord(config=asdict(cfg))
    state = OptState.zeros_like(net)
    params = net
    attack = cfg.loss_mode == "adversarial" and cfg.K > 0
    t0 = time.perf_counter()
    for i in range(1, cfg.M + 1):
        batch = sample_batch(problem.n, problem.T, cfg.N1, cfg.N2, stream(cfg.seed, "train", i))
        if attack:
            batch, faults = pgd_attack(params, batch, problem, cfg, return_faults=True)
            record.attack_faults += faults
        lr = cfg.lr_at(i)
        try:
            terms = loss_terms(params, batch, problem, cfg)
            state, params = adam_update(state, params, terms.grad, lr,
                                        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        except FloatingPointError as exc:
            record.abort_reason = f"iteration {i}: {exc}"
            record.abort_iteration = i
            log.warning("run aborted at iteration %d: %s", i, exc)
            break
        row = TraceRow(i, terms.domain_loss, terms.boundary_loss, lr, terms.residual_sq)
        record.trace.append(row)
        if on_iteration is not None:
            on_iteration(i, params, row)
    record.params = params
    record.duration_s = time.perf_counter() - t0
    return record
