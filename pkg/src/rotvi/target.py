"""Target distributions given by a potential, with Gaussian mixtures built in.

A target is ``pi(dx) = exp(-V(x)) dx / Z``. Mixture potentials keep the
per-component ``|Sigma_k|^{-1/2}`` factor and drop the global
``(2 pi)^{-d/2}``, so every mixture has ``log Z = (d/2) log(2 pi)`` and KL
values computed against it are exact rather than up to a constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError

LOG_2PI = math.log(2.0 * math.pi)

_SYM_TOL = 1e-12
_PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class Potential:
    """A potential ``V`` on ``R^d`` with its gradient.

    ``value`` and ``grad`` accept a single point of shape ``(d,)`` or a batch
    of shape ``(n, d)``. ``value_and_grad`` is optional and only used to
    share work in hot loops.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    log_normalizer: Optional[float] = None
    value_and_grad: Optional[Callable[[np.ndarray], tuple]] = None

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.value_and_grad is not None:
            return self.value_and_grad(x)
        return self.value(x), self.grad(x)


def quadratic_potential(dim: int) -> Potential:
    """``V(x) = |x|^2 / 2``, the standard normal with ``log Z = (d/2) log 2 pi``."""

    def value(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    def grad(x):
        return np.array(x, dtype=float)

    return Potential(dim, value, grad, 0.5 * dim * LOG_2PI)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """``N(mean, covariance)`` with cached Cholesky factor and precision."""

    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    precision: np.ndarray = field(init=False, repr=False)
    logdet: float = field(init=False, repr=False)
    whiten: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.covariance, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InputError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(mean)):
            raise InputError("mean and covariance must be finite")
        if np.max(np.abs(cov - cov.T)) > _SYM_TOL * max(1.0, np.max(np.abs(cov))):
            raise InputError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InputError("covariance is not positive definite") from None
        if np.min(np.diag(chol)) < _PIVOT_TOL:
            raise InputError("covariance is numerically singular (Cholesky pivot < 1e-10)")
        whiten = np.linalg.inv(chol)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "whiten", whiten)
        object.__setattr__(self, "precision", whiten.T @ whiten)
        object.__setattr__(self, "logdet", 2.0 * float(np.sum(np.log(np.diag(chol)))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class MixtureTarget:
    """Finite mixture of Gaussian components."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        comps = tuple(self.components)
        if len(comps) == 0 or len(comps) != len(w):
            raise InputError("need one weight per component and at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InputError("weights must be nonnegative and sum to 1")
        if len({c.dim for c in comps}) != 1:
            raise InputError("all components must share one dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, weights, means, covariances) -> "MixtureTarget":
        comps = tuple(GaussianComponent(m, c) for m, c in zip(means, covariances))
        return cls(np.asarray(weights, dtype=float), comps)

    @classmethod
    def from_dict(cls, spec: dict) -> "MixtureTarget":
        try:
            return cls.from_arrays(spec["weights"], spec["means"], spec["covariances"])
        except KeyError as exc:
            raise InputError(f"mixture specification is missing key {exc}") from None

    @classmethod
    def from_json(cls, path) -> "MixtureTarget":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": [c.mean.tolist() for c in self.components],
            "covariances": [c.covariance.tolist() for c in self.components],
        }

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def log_normalizer(self) -> float:
        return 0.5 * self.dim * LOG_2PI

    def smoothness(self) -> float:
        """Largest eigenvalue over all component precisions."""
        return max(float(np.linalg.eigvalsh(c.precision)[-1]) for c in self.components)

    def pushforward(self, A: np.ndarray) -> "MixtureTarget":
        """Law of ``A X`` for ``X ~ self`` and invertible ``A``."""
        A = np.asarray(A, dtype=float)
        covs = []
        for c in self.components:
            S = A @ c.covariance @ A.T
            covs.append(0.5 * (S + S.T))
        return MixtureTarget.from_arrays(self.weights, [A @ c.mean for c in self.components], covs)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        second = sum(w * (c.covariance + np.outer(c.mean, c.mean)) for w, c in zip(self.weights, self.components))
        return second - np.outer(mu, mu)

    def potential(self) -> Potential:
        return Potential(
            self.dim,
            lambda x: mixture_potential(self, x),
            lambda x: mixture_grad(self, x),
            self.log_normalizer,
            lambda x: _value_and_grad(self, x),
        )


def _logsumexp_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp and softmax of a finite-or--inf logit matrix."""
    top = np.max(a, axis=1, keepdims=True)
    e = np.exp(a - top)
    tot = e.sum(axis=1, keepdims=True)
    return (top + np.log(tot))[:, 0], e / tot


def _as_batch(target: MixtureTarget, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != target.dim:
        raise InputError(f"expected points of dimension {target.dim}, got shape {x.shape}")
    return xb, single


def _component_terms(target: MixtureTarget, x: np.ndarray):
    # log w_k - logdet_k / 2 - |L_k^{-1}(x - m_k)|^2 / 2, plus the whitened residuals
    n, K = x.shape[0], len(target.components)
    logits = np.empty((n, K))
    resid = []
    with np.errstate(divide="ignore"):
        logw = np.log(target.weights)
    for k, c in enumerate(target.components):
        u = (x - c.mean) @ c.whiten.T
        resid.append(u)
        logits[:, k] = logw[k] - 0.5 * c.logdet - 0.5 * np.einsum("ni,ni->n", u, u)
    return logits, resid


def mixture_potential(target: MixtureTarget, x) -> np.ndarray | float:
    """``V(x) = -log sum_k w_k |Sigma_k|^{-1/2} exp(-|Sigma_k^{-1/2}(x - m_k)|^2 / 2)``."""
    xb, single = _as_batch(target, x)
    logits, _ = _component_terms(target, xb)
    V = -_logsumexp_rows(logits)[0]
    return float(V[0]) if single else V


def responsibilities(target: MixtureTarget, x) -> np.ndarray:
    """Posterior component probabilities, computed in log space."""
    xb, single = _as_batch(target, x)
    logits, _ = _component_terms(target, xb)
    r = _logsumexp_rows(logits)[1]
    return r[0] if single else r


def _value_and_grad(target: MixtureTarget, x):
    xb, single = _as_batch(target, x)
    logits, resid = _component_terms(target, xb)
    lse, r = _logsumexp_rows(logits)
    V = -lse
    g = np.zeros_like(xb)
    for k, c in enumerate(target.components):
        # Sigma^{-1}(x - m) = L^{-T} L^{-1} (x - m)
        g += r[:, k : k + 1] * (resid[k] @ c.whiten)
    if single:
        return float(V[0]), g[0]
    return V, g


def mixture_grad(target: MixtureTarget, x) -> np.ndarray:
    """Gradient ``sum_k r_k(x) Sigma_k^{-1}(x - m_k)`` of the mixture potential."""
    return _value_and_grad(target, x)[1]


def mixture_log_density(target: MixtureTarget, x) -> np.ndarray | float:
    """Normalized ``log pi(x)``."""
    return -mixture_potential(target, x) - target.log_normalizer


def sample_mixture(target: MixtureTarget, n: int, rng: np.random.Generator, return_labels: bool = False):
    """Draw ``n`` i.i.d. points: a categorical label, then a Cholesky-transformed normal."""
    if n < 1:
        raise InputError("n must be at least 1")
    labels = rng.choice(len(target.components), size=n, p=target.weights)
    z = rng.standard_normal((n, target.dim))
    x = np.empty_like(z)
    for k, c in enumerate(target.components):
        idx = labels == k
        x[idx] = c.mean + z[idx] @ c.chol.T
    return (x, labels) if return_labels else x


def mode_masses(target: MixtureTarget, samples: np.ndarray) -> np.ndarray:
    """Average responsibility of each component over ``samples``.

    For samples drawn from the target itself this estimates the mixing
    weights; a collapsed approximation puts almost all of it on one entry.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise InputError("need a non-empty (n, d) sample matrix")
    return responsibilities(target, samples).mean(axis=0)


def isotropic_mixture(weights: Sequence[float], means: Sequence[Sequence[float]]) -> MixtureTarget:
    means = np.asarray(means, dtype=float)
    d = means.shape[1]
    return MixtureTarget.from_arrays(weights, means, [np.eye(d)] * len(means))
