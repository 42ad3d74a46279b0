"""Online collocation sampling: ``(x, t) ~ N(0, I_n) x U(0, T)`` and ``x~ ~ N(0, I_n)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CollocationBatch:
    domain_x: np.ndarray  # (N1, n)
    domain_t: np.ndarray  # (N1,)
    boundary_x: np.ndarray  # (N2, n); the boundary time is always T

    def __post_init__(self):
        if self.domain_x.shape[0] != self.domain_t.shape[0]:
            raise ValueError("domain_x and domain_t disagree on batch size")
        if self.domain_x.shape[1] != self.boundary_x.shape[1]:
            raise ValueError("domain and boundary points disagree on dimension")

    @property
    def n(self) -> int:
        return self.domain_x.shape[1]


def sample_batch(n: int, T: float, N1: int, N2: int, rng: np.random.Generator) -> CollocationBatch:
    x = rng.standard_normal((N1, n))
    t = rng.uniform(0.0, T, size=N1)
    xb = rng.standard_normal((N2, n))
    return CollocationBatch(x, t, xb)
