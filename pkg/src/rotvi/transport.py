"""Polyhedral family of separable transport maps.

Each coordinate uses the same dictionary of nondecreasing univariate maps
(the identity plus smooth steps ``tanh(alpha (x - beta))``). A map is

    T(x)_i = v_i + sum_k lam[i, k] * T_k(x_i),   lam >= 0,

so it is coordinatewise nondecreasing and its Jacobian is diagonal. The
identity coefficient is kept above ``floor`` which makes every map strictly
increasing with a finite log-determinant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, InputError, NumericalError, SingularMapError

DEFAULT_FLOOR = 1e-3
DEFAULT_TAU = 1e-8

# Smooth steps on a grid of centers, plus steep steps. A steep step at
# beta = Phi^{-1}(p) sends a fraction p of the reference mass to one side of a
# gap, so a single coordinate can carry two well separated modes with weights
# p and 1 - p; the centers below are the deciles of N(0, 1) to 4 decimals.
DECILE_BETAS = (-1.2816, -0.8416, -0.5244, -0.2533, 0.0, 0.2533, 0.5244, 0.8416, 1.2816)
DEFAULT_TANH_GRID = (
    {"alphas": (1.0, 2.0, 4.0), "betas": (-2.0, -1.0, 0.0, 1.0, 2.0)},
    {"alphas": (8.0, 32.0), "betas": DECILE_BETAS},
    {"alphas": (1024.0,), "betas": (0.0,)},
)


def _sech2(u: np.ndarray) -> np.ndarray:
    # 4 e^{-2|u|} / (1 + e^{-2|u|})^2, positive and overflow free
    e = np.exp(-2.0 * np.abs(u))
    return 4.0 * e / (1.0 + e) ** 2


@dataclass(frozen=True)
class DictionaryEntry:
    """A nondecreasing univariate map: ``identity`` or ``tanh`` step."""

    kind: str
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "tanh"):
            raise InputError(f"unknown dictionary entry kind {self.kind!r}")
        if self.kind == "tanh" and not self.alpha > 0:
            raise InputError("tanh steepness must be positive")

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x.copy()
        return np.tanh(self.alpha * (x - self.beta))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.ones_like(x)
        return self.alpha * _sech2(self.alpha * (x - self.beta))

    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        return f"tanh(a={self.alpha:g},b={self.beta:g})"


@dataclass(frozen=True)
class Dictionary:
    """Ordered dictionary of univariate maps; entry 0 is always the identity."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries or entries[0].kind != "identity":
            raise InputError("the first dictionary entry must be the identity")
        if any(e.kind == "identity" for e in entries[1:]):
            raise InputError("only one identity entry is allowed")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_grid(cls, grid: Iterable[dict] = DEFAULT_TANH_GRID) -> "Dictionary":
        entries = [DictionaryEntry("identity")]
        seen = set()
        for block in grid:
            for a in block["alphas"]:
                for b in block["betas"]:
                    if (float(a), float(b)) in seen:
                        continue
                    seen.add((float(a), float(b)))
                    entries.append(DictionaryEntry("tanh", float(a), float(b)))
        return cls(tuple(entries))

    @classmethod
    def default(cls) -> "Dictionary":
        return cls.from_grid(DEFAULT_TANH_GRID)

    def __len__(self) -> int:
        return len(self.entries)

    def features(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and derivatives of every entry at ``x``; trailing axis indexes entries."""
        x = np.asarray(x, dtype=float)
        vals = np.empty(x.shape + (len(self),))
        ders = np.empty_like(vals)
        for k, e in enumerate(self.entries):
            vals[..., k] = e.evaluate(x)
            ders[..., k] = e.derivative(x)
        return vals, ders

    def to_dict(self) -> list:
        return [{"kind": e.kind, "alpha": e.alpha, "beta": e.beta} for e in self.entries]


@dataclass(frozen=True, eq=False)
class SeparableMapParams:
    """``theta = (lam, shift)``: coefficients of shape ``(d, K)`` and shift ``(d,)``."""

    dictionary: Dictionary
    lam: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float)
        shift = np.array(self.shift, dtype=float).reshape(-1)
        if lam.ndim != 2 or lam.shape != (shift.shape[0], len(self.dictionary)):
            raise InputError(
                f"coefficients must have shape (d, {len(self.dictionary)}), got {lam.shape} with d={shift.shape[0]}"
            )
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise InputError("map coefficients must be finite and nonnegative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def identity(cls, dictionary: Dictionary, d: int, shift=None) -> "SeparableMapParams":
        lam = np.zeros((d, len(dictionary)))
        lam[:, 0] = 1.0
        return cls(dictionary, lam, np.zeros(d) if shift is None else shift)

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    def with_values(self, lam=None, shift=None) -> "SeparableMapParams":
        return SeparableMapParams(
            self.dictionary, self.lam if lam is None else lam, self.shift if shift is None else shift
        )

    def to_dict(self) -> dict:
        return {"dictionary": self.dictionary.to_dict(), "lam": self.lam.tolist(), "shift": self.shift.tolist()}


def _check_points(theta: SeparableMapParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != theta.dim:
        raise InputError(f"expected points of dimension {theta.dim}, got shape {x.shape}")
    return x


def map_forward(theta: SeparableMapParams, x) -> np.ndarray:
    """Apply ``T_theta`` to a point ``(d,)`` or a batch ``(n, d)``."""
    x = _check_points(theta, x)
    vals, _ = theta.dictionary.features(x)
    return theta.shift + np.einsum("...ik,ik->...i", vals, theta.lam)


def map_derivatives(theta: SeparableMapParams, x) -> np.ndarray:
    """Diagonal of ``D T_theta(x)``."""
    x = _check_points(theta, x)
    _, ders = theta.dictionary.features(x)
    return np.einsum("...ik,ik->...i", ders, theta.lam)


def map_log_jacobian(theta: SeparableMapParams, x) -> np.ndarray | float:
    """``log det D T_theta(x) = sum_i log T_i'(x_i)``."""
    dT = map_derivatives(theta, x)
    if np.any(dT <= 0):
        raise SingularMapError("transport map has a non-positive derivative")
    out = np.sum(np.log(dT), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def map_inverse(theta: SeparableMapParams, y, iters: int = 100) -> np.ndarray:
    """Invert ``T_theta`` coordinatewise by bisection."""
    y = _check_points(theta, y)
    lam0 = theta.lam[:, 0]
    spread = theta.lam[:, 1:].sum(axis=1)
    lo = (y - theta.shift - spread) / lam0 - 1.0
    hi = (y - theta.shift + spread) / lam0 + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = map_forward(theta, mid) > y
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def pushforward_sample(theta: SeparableMapParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Samples of ``(T_theta)_# N(0, I_d)``."""
    return map_forward(theta, rng.standard_normal((n, theta.dim)))


# --------------------------------------------------------------------------
# Gram matrix and projection
# --------------------------------------------------------------------------


def univariate_rule(dictionary: Dictionary, panel_nodes: int = 16, span: float = 12.0):
    """Composite Gauss-Legendre rule for integrals against ``N(0, 1)``.

    Panel breakpoints are refined geometrically around every step center, down
    to a fraction of the steepest width, so products of steep steps are
    resolved. Returns ``(nodes, weights)`` with weights summing to ~1.
    """
    breaks = {-span, span}
    for e in dictionary.entries:
        if e.kind != "tanh":
            continue
        width = 1.0 / e.alpha
        for r in np.geomspace(width * 1e-3, span, 60):
            breaks.add(e.beta - r)
            breaks.add(e.beta + r)
        breaks.add(e.beta)
    breaks.update(np.linspace(-span, span, 97).tolist())
    edges = np.array(sorted(b for b in breaks if -span <= b <= span))
    edges = edges[np.concatenate(([True], np.diff(edges) > 1e-15))]
    g, gw = np.polynomial.legendre.leggauss(panel_nodes)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (b - a) * g + 0.5 * (a + b)).ravel()
    weights = (0.5 * (b - a) * gw).ravel()
    weights = weights * np.exp(-0.5 * nodes**2) / np.sqrt(2.0 * np.pi)
    return nodes, weights


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """``Q[k, l] = <T_k, T_l>_{L2(N(0,1))} + tau * delta_kl``, shared by all coordinates."""

    matrix: np.ndarray
    tau: float
    dim: int
    _factor: tuple = field(init=False, repr=False)

    def __post_init__(self):
        Q = np.array(self.matrix, dtype=float)
        if np.max(np.abs(Q - Q.T)) > 1e-12:
            raise ConfigurationError("Gram matrix is not symmetric")
        try:
            c, low = cho_factor(Q, lower=True)
        except np.linalg.LinAlgError:
            raise ConfigurationError("Gram matrix is not positive definite; dictionary too collinear") from None
        if np.min(np.diag(c)) <= 0:
            raise ConfigurationError("Gram matrix is not positive definite; dictionary too collinear")
        object.__setattr__(self, "matrix", Q)
        object.__setattr__(self, "_factor", (c, low))

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def solve(self, g: np.ndarray) -> np.ndarray:
        """Apply ``Q^{-1}`` to each row of a ``(d, K)`` array."""
        return cho_solve(self._factor, np.asarray(g, dtype=float).T).T

    def norm(self, a: np.ndarray) -> float:
        a = np.atleast_2d(a)
        return float(np.sqrt(np.einsum("ik,kl,il->", a, self.matrix, a)))


def build_gram(dictionary: Dictionary, dim: int = 1, rule=None, tau: float = DEFAULT_TAU) -> GramMatrix:
    """Gram matrix of the dictionary under ``N(0, 1)``.

    ``rule`` is an optional ``(nodes, weights)`` pair; it defaults to
    :func:`univariate_rule`. A plain Gauss-Hermite rule is fine for smooth
    dictionaries but misses the steep steps.
    """
    nodes, weights = univariate_rule(dictionary) if rule is None else rule
    if len(nodes) < 2 * len(dictionary):
        raise ConfigurationError("quadrature rule has fewer than 2|M| nodes")
    vals, _ = dictionary.features(np.asarray(nodes))
    Q = (vals * np.asarray(weights)[:, None]).T @ vals
    Q = 0.5 * (Q + Q.T) + tau * np.eye(len(dictionary))
    return GramMatrix(Q, tau, dim)


def _nnqp(Q: np.ndarray, c: np.ndarray, max_iter: int, tol: float, start: Optional[np.ndarray] = None):
    """Solve ``min_{y >= 0} y'Qy/2 - c'y`` by a Lawson-Hanson active set."""
    K = len(c)
    passive = np.zeros(K, dtype=bool) if start is None else start.copy()
    y = np.zeros(K)

    def solve_passive(mask):
        s = np.zeros(K)
        if mask.any():
            s[mask] = np.linalg.solve(Q[np.ix_(mask, mask)], c[mask])
        return s

    def fix_infeasible(s):
        nonlocal y, passive
        # step from y toward s until the first coordinate hits zero, then drop it
        for _ in range(K + 1):
            bad = passive & (s <= 0)
            if not bad.any():
                return s
            ratio = y[bad] / (y[bad] - s[bad])
            step = np.min(ratio)
            y = y + step * (s - y)
            passive &= y > tol
            y[~passive] = 0.0
            s = solve_passive(passive)
        raise NumericalError("active-set inner loop did not terminate")

    if passive.any():
        # walk from the feasible origin toward the warm-start solution
        y = fix_infeasible(solve_passive(passive))

    for _ in range(max_iter):
        w = c - Q @ y
        cand = ~passive & (w > tol)
        if not cand.any():
            return y
        j = np.flatnonzero(cand)[np.argmax(w[cand])]
        passive[j] = True
        y = fix_infeasible(solve_passive(passive))
    raise NumericalError(f"active-set projection exceeded {max_iter} iterations")


def kkt_residual(Q: np.ndarray, target: np.ndarray, mu: np.ndarray, lower: np.ndarray) -> float:
    """KKT residual of ``min_{mu >= lower} (mu - target)' Q (mu - target)``."""
    grad = Q @ (mu - target)
    slack = mu - lower
    free = slack > 0
    r = [np.max(np.maximum(-slack, 0.0), initial=0.0)]
    r.append(np.max(np.abs(grad[free]), initial=0.0))
    r.append(np.max(np.maximum(-grad[~free], 0.0), initial=0.0))
    r.append(float(np.max(np.abs(grad * slack), initial=0.0)))
    return float(max(r))


def project_lambda(
    lam: np.ndarray, gram: GramMatrix | np.ndarray, lower=None, refine: int = 1, hint: Optional[np.ndarray] = None
) -> np.ndarray:
    """Projection onto ``{mu >= lower}`` in the ``Q``-norm, row by row.

    ``lower`` is a per-entry lower bound broadcastable to a row; the MFVI
    step passes ``floor`` on the identity entry and zero elsewhere. ``hint``
    is an optional boolean mask (same shape as ``lam``) of entries expected
    to stay strictly above their bound, used to warm-start the active set.
    """
    Q = gram.matrix if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=float)
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    K = Q.shape[0]
    if lam.shape[1] != K:
        raise InputError("coefficient length does not match the Gram matrix")
    low = np.zeros(K) if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), (K,))
    out = np.empty_like(lam)
    scale = max(1.0, float(np.max(np.abs(np.diag(Q)))))
    for i, row in enumerate(lam):
        shifted = row - low
        if np.all(shifted >= 0):
            out[i] = row
            continue
        c = Q @ shifted
        tol = 1e-13 * scale * max(1.0, float(np.max(np.abs(shifted))))
        start = shifted > 0 if hint is None else np.atleast_2d(hint)[i].astype(bool)
        y = _nnqp(Q, c, 10 * K, tol, start=start)
        for _ in range(refine):
            # one round of iterative refinement on the free block
            free = y > 0
            if free.any():
                r = c[free] - Q[np.ix_(free, free)] @ y[free]
                y[free] += np.linalg.solve(Q[np.ix_(free, free)], r)
                y = np.maximum(y, 0.0)
        out[i] = low + y
    return out


def lower_bounds(dictionary: Dictionary, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    low = np.zeros(len(dictionary))
    low[0] = floor
    return low
