"""Fixed point sets representing the reference measure N(0, I_d).

Every expectation in the objective is a weighted sum over one of these sets.
Monte Carlo pools are drawn once and reused for the whole run, which makes the
objective a deterministic function of the parameters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError


@dataclass(frozen=True, eq=False)
class QuadratureSet:
    """Points ``(N, d)`` and weights ``(N,)`` summing to one."""

    points: np.ndarray
    weights: np.ndarray
    mode: str
    seed: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] != w.shape[0]:
            raise InputError("points must be (N, d) with one weight per point")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InputError("quadrature weights must be nonnegative and sum to 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def is_monte_carlo(self) -> bool:
        return self.mode == "mc"


def monte_carlo(dim: int, n: int = 4096, seed: int | np.random.SeedSequence = 0) -> QuadratureSet:
    if n < 2:
        raise InputError("a Monte Carlo pool needs at least two points")
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, dim))
    s = seed if isinstance(seed, int) else None
    return QuadratureSet(pts, np.full(n, 1.0 / n), "mc", s)


def gauss_hermite(dim: int, nodes: int = 40, max_points: int = 1_000_000) -> QuadratureSet:
    """Tensor Gauss-Hermite rule for ``N(0, I_d)`` (probabilists' scaling)."""
    if nodes ** dim > max_points:
        raise InputError(f"tensor grid with {nodes}^{dim} points is too large")
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    pts = np.array(list(itertools.product(x, repeat=dim)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    return QuadratureSet(pts, wts / wts.sum(), "gh")


def parse_quadrature(spec: str, dim: int, seed: int | np.random.SeedSequence = 0) -> QuadratureSet:
    """Build a set from ``"mc:N"`` or ``"gh:nodes"``."""
    try:
        kind, count = spec.split(":")
        count = int(count)
    except ValueError:
        raise InputError(f"quadrature spec must look like 'mc:4096' or 'gh:40', got {spec!r}") from None
    if kind == "mc":
        return monte_carlo(dim, count, seed)
    if kind == "gh":
        return gauss_hermite(dim, count)
    raise InputError(f"unknown quadrature kind {kind!r}")
