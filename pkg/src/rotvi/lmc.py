"""Unadjusted Langevin sampler used as the sampling baseline.

``x_{k+1} = x_k - h grad V(x_k) + sqrt(2 h) xi_k`` run for many independent
chains at once. Each chain has its own RNG stream so results do not depend
on how chains are batched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError, NumericalError
from .mfvi import as_potential

DIVERGENCE_RADIUS = 1e6


@dataclass
class LmcConfig:
    step: float = 0.05
    steps: int = 20_000
    chains: int = 64
    burn_in: int = 2_000
    thin: int = 10
    init_scale: float = 2.0  # chains start from N(0, init_scale^2 I)
    seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise InputError("step size must be positive")
        if self.chains < 1 or self.thin < 1:
            raise InputError("chains and thin must be at least 1")
        if not 0 <= self.burn_in < self.steps:
            raise InputError("burn-in must be smaller than the number of steps")


@dataclass(eq=False)
class LmcResult:
    samples: np.ndarray  # (n, d), grouped by chain
    chain_ids: np.ndarray  # (n,)
    diverged: list = field(default_factory=list)
    config: Optional[LmcConfig] = None

    def per_chain(self) -> list:
        return [self.samples[self.chain_ids == c] for c in np.unique(self.chain_ids)]


def lmc_run(target, config: Optional[LmcConfig] = None, rng: Optional[np.random.SeedSequence] = None) -> LmcResult:
    """Run ``config.chains`` ULA chains and keep thinned post-burn-in draws.

    A chain whose state leaves the ball of radius ``1e6`` (or turns
    non-finite) is stopped and reported in ``diverged``; its draws are
    discarded.

    Raises:
        NumericalError: if every chain diverges.
    """
    config = LmcConfig() if config is None else config
    potential, _ = as_potential(target)
    d = potential.dim
    root = np.random.SeedSequence(config.seed) if rng is None else rng
    gens = [np.random.default_rng(s) for s in root.spawn(config.chains)]
    x = np.stack([config.init_scale * g.standard_normal(d) for g in gens])
    alive = np.ones(config.chains, dtype=bool)
    keep_steps = np.arange(config.burn_in, config.steps)[:: config.thin]
    if len(keep_steps) == 0:
        raise InputError("no draws remain after burn-in and thinning")
    out = np.empty((len(keep_steps), config.chains, d))
    h = config.step
    scale = math.sqrt(2.0 * h)
    block = 256
    slot = 0
    for start in range(0, config.steps, block):
        n = min(block, config.steps - start)
        noise = np.stack([g.standard_normal((n, d)) for g in gens], axis=1)  # (n, chains, d)
        for t in range(n):
            _, grad = potential.evaluate(x)
            x = x - h * grad + scale * noise[t]
            bad = alive & ~(np.all(np.isfinite(x), axis=1) & (np.linalg.norm(x, axis=1) <= DIVERGENCE_RADIUS))
            if bad.any():
                alive &= ~bad
                x[bad] = 0.0  # frozen; draws discarded below
                if not alive.any():
                    raise NumericalError("all LMC chains diverged; reduce the step size")
            k = start + t
            if slot < len(keep_steps) and k == keep_steps[slot]:
                out[slot] = x
                slot += 1
    kept = out[:, alive, :].transpose(1, 0, 2)  # (chains, draws, d)
    ids = np.repeat(np.flatnonzero(alive), len(keep_steps))
    return LmcResult(kept.reshape(-1, d), ids, np.flatnonzero(~alive).tolist(), config)


def lmc_moment_check(samples, target, chain_ids=None, n_sigma: float = 3.0, balance_tol: float = 0.05) -> dict:
    """Compare sample moments with the exact moments of a Gaussian mixture.

    Standard errors come from the spread of per-chain means when chain ids
    are given (this accounts for autocorrelation), otherwise from the i.i.d.
    formula. ``mode_balance_ok`` records whether the estimated mode masses
    are within ``balance_tol`` of the mixture weights; it is a diagnostic,
    not an assertion.
    """
    from .target import mode_masses

    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("need at least two samples")
    mean = x.mean(axis=0)
    if chain_ids is not None and len(np.unique(chain_ids)) > 1:
        groups = np.unique(chain_ids)
        cm = np.stack([x[chain_ids == c].mean(axis=0) for c in groups])
        se = cm.std(axis=0, ddof=1) / math.sqrt(len(groups))
    else:
        se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
    exact_mean = target.mean()
    masses = mode_masses(target, x)
    return {
        "mean": mean.tolist(),
        "mean_se": se.tolist(),
        "exact_mean": exact_mean.tolist(),
        "mean_ok": bool(np.all(np.abs(mean - exact_mean) <= n_sigma * np.maximum(se, 1e-12))),
        "covariance": np.cov(x, rowvar=False).reshape(x.shape[1], -1).tolist(),
        "exact_covariance": target.covariance().tolist(),
        "mode_masses": masses.tolist(),
        "weights": target.weights.tolist(),
        "mode_balance_ok": bool(np.all(np.abs(masses - target.weights) <= balance_tol)),
    }


def write_samples_csv(result: LmcResult, path) -> Path:
    """One row per draw: ``x1..xd`` and the chain id."""
    path = Path(path)
    d = result.samples.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + ["chain"])
        for row, c in zip(result.samples, result.chain_ids):
            w.writerow([repr(float(v)) for v in row] + [int(c)])
    return path
