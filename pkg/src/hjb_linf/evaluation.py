"""Relative-error metrics, Monte-Carlo L^p estimates and 2-D heatmap grids."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .jet import MlpParams, value_input_grad
from .problems import ProblemSpec, exact_solution
from .rng import stream

CHANNELS = ("value", "grad_norm", "abs_error", "grad_error", "exact_value", "exact_grad_norm")
_ORACLE_CHANNELS = ("abs_error", "grad_error", "exact_value", "exact_grad_norm")


class LpOverflowError(FloatingPointError):
    """``|f|^p`` overflowed double precision."""


@dataclass(frozen=True)
class MetricsRecord:
    l1_rel: float
    l2_rel: float
    w11_rel: float
    samples_S: int
    seed: int

    def as_percentages(self) -> str:
        return f"{100 * self.l1_rel:.2f}% {100 * self.l2_rel:.2f}% {100 * self.w11_rel:.2f}%"

    def to_dict(self) -> dict:
        return asdict(self)


def _model_value_grad(params, x, t, chunk=2000):
    vals = np.empty(x.shape[0])
    grads = np.empty_like(x)
    n = x.shape[1]
    for lo in range(0, x.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        v, g = value_input_grad(params, x[sl], t[sl])
        vals[sl] = v
        grads[sl] = g[:, :n]
    return vals, grads


def _oracle(problem, x, t, mc_samples, seed, oracle):
    if oracle is not None:
        vals, grads = oracle(x, t)
        return (np.broadcast_to(np.asarray(vals, dtype=float), (x.shape[0],)),
                np.broadcast_to(np.asarray(grads, dtype=float), x.shape))
    if not problem.has_oracle:
        raise ValueError("problem has no exact-solution oracle")
    out = exact_solution(problem, x, t, mc_samples=mc_samples, seed=seed)
    return out.value, out.spatial_grad


def relative_errors(params: MlpParams, problem: ProblemSpec, S: int = 10_000, seed: int = 0,
                    oracle_mc_samples: int = 10_000, oracle: Optional[Callable] = None) -> MetricsRecord:
    """L1, L2 and W^{1,1} relative errors on ``S`` uniform points of ``[0,1]^n x [0,T]``.

    ``oracle(x, t) -> (values, spatial_grads)`` replaces the problem's exact
    solution when given. The L2 figure is the root of the ratio of squared
    sums, so a uniform 10% offset reads as 10% in every column.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = stream(seed, "eval")
    x = rng.uniform(0.0, 1.0, size=(S, problem.n))
    t = rng.uniform(0.0, problem.T, size=S)
    u_star, g_star = _oracle(problem, x, t, oracle_mc_samples, seed, oracle)
    u, g = _model_value_grad(params, x, t)
    e = np.abs(u_star - u)
    eg = np.abs(g_star - g).sum(axis=1)
    l1 = e.sum() / np.abs(u_star).sum()
    l2 = np.sqrt((e**2).sum() / (u_star**2).sum())
    w11 = (e + eg).sum() / (np.abs(u_star) + np.abs(g_star).sum(axis=1)).sum()
    return MetricsRecord(float(l1), float(l2), float(w11), int(S), int(seed))


def estimate_lp_norm(point_fn: Callable, p: float, N: int, rng: np.random.Generator, dim: int = 1):
    """``((1/N) sum |f(X_i)|^p)^(1/p)`` with ``X_i ~ U[0,1]^dim``.

    Returns the norm estimate and the standard error of the mean of
    ``|f|^p``.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    X = rng.uniform(0.0, 1.0, size=(N, dim))
    f = np.asarray(point_fn(X), dtype=np.float64).reshape(N)
    with np.errstate(over="ignore", invalid="ignore"):
        powers = np.abs(f) ** p
        mean = powers.mean()
        stderr = powers.std(ddof=1) / np.sqrt(N)
    if not (np.isfinite(mean) and np.isfinite(stderr)):
        raise LpOverflowError(f"|f|^{p} overflows double precision")
    return float(mean ** (1.0 / p)), float(stderr)


@dataclass(frozen=True)
class GridRequest:
    channel: str = "value"
    x1_range: Sequence[float] = (0.0, 1.0)
    x2_range: Sequence[float] = (0.0, 1.0)
    resolution: Sequence[int] = (101, 101)
    fixed: Optional[float] = None  # value of x3..xn; None picks the problem default
    t: float = 0.0

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}; choose from {', '.join(CHANNELS)}")
        if min(self.resolution) < 2:
            raise ValueError("resolution must be >= 2 per axis")


@dataclass
class GridSnapshot:
    request: GridRequest
    fixed: float
    values: np.ndarray = field(repr=False)  # (ny, nx); row i is x2 = x2_grid[i]

    @property
    def x1(self):
        return np.linspace(*self.request.x1_range, self.request.resolution[0])

    @property
    def x2(self):
        return np.linspace(*self.request.x2_range, self.request.resolution[1])


def default_fixed_coordinate(problem: ProblemSpec) -> float:
    return 1.0 if problem.family == "linear" else 0.0


def grid_snapshot(params: MlpParams, problem: ProblemSpec, request: GridRequest,
                  oracle_mc_samples: int = 10_000, seed: int = 0,
                  oracle: Optional[Callable] = None) -> GridSnapshot:
    """Evaluate a channel on the (x1, x2) plane with the other coordinates fixed.

    Oracle-backed channels share one Monte-Carlo sample set across all cells.
    """
    if request.channel in _ORACLE_CHANNELS and oracle is None and not problem.has_oracle:
        raise ValueError(f"channel {request.channel!r} needs an exact solution, which this problem lacks")
    if problem.n < 2:
        raise ValueError("grid snapshots need n >= 2")
    fixed = default_fixed_coordinate(problem) if request.fixed is None else float(request.fixed)
    nx, ny = request.resolution
    x1 = np.linspace(*request.x1_range, nx)
    x2 = np.linspace(*request.x2_range, ny)
    X1, X2 = np.meshgrid(x1, x2)  # (ny, nx)
    pts = np.full((nx * ny, problem.n), fixed)
    pts[:, 0] = X1.ravel()
    pts[:, 1] = X2.ravel()
    ts = np.full(nx * ny, float(request.t))
    ch = request.channel
    if ch in ("value", "grad_norm", "abs_error", "grad_error"):
        u, g = _model_value_grad(params, pts, ts)
    if ch in _ORACLE_CHANNELS:
        us, gs = _oracle(problem, pts, ts, oracle_mc_samples, seed, oracle)
    if ch == "value":
        out = u
    elif ch == "grad_norm":
        out = np.linalg.norm(g, axis=1)
    elif ch == "abs_error":
        out = np.abs(u - us)
    elif ch == "grad_error":
        out = np.linalg.norm(g - gs, axis=1)
    elif ch == "exact_value":
        out = us
    else:
        out = np.linalg.norm(gs, axis=1)
    return GridSnapshot(request, fixed, out.reshape(ny, nx))


def write_grid_csv(snap: GridSnapshot, path) -> None:
    r = snap.request
    with open(path, "w", newline="") as fh:
        fh.write(f"# channel={r.channel}\n")
        fh.write(f"# x1_range={r.x1_range[0]!r},{r.x1_range[1]!r}\n")
        fh.write(f"# x2_range={r.x2_range[0]!r},{r.x2_range[1]!r}\n")
        fh.write(f"# resolution={r.resolution[0]},{r.resolution[1]}\n")
        fh.write(f"# fixed={snap.fixed!r}\n")
        fh.write(f"# t={r.t!r}\n")
        fh.write("# layout=row i has x2 = x2_grid[i]; column j has x1 = x1_grid[j]\n")
        w = csv.writer(fh)
        for row in snap.values:
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> GridSnapshot:
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
            elif line.strip():
                rows.append([float(v) for v in line.strip().split(",")])
    pair = lambda s, typ: tuple(typ(v) for v in s.split(","))  # noqa: E731
    req = GridRequest(channel=meta["channel"], x1_range=pair(meta["x1_range"], float),
                      x2_range=pair(meta["x2_range"], float), resolution=pair(meta["resolution"], int),
                      fixed=float(meta["fixed"]), t=float(meta["t"]))
    return GridSnapshot(req, float(meta["fixed"]), np.array(rows))
