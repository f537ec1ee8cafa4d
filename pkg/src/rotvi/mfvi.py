"""KL objective over rotated pushforwards and the projected-gradient MFVI step.

For ``mu = (T_theta)_# rho`` with ``rho = N(0, I_d)`` and a rotation ``O``,

    KL((O o T_theta)_# rho || pi)
        = E_rho[ V(O T_theta(x)) - log det D T_theta(x) ] + H(rho) + log Z,

with ``H(rho) = -(d/2)(1 + log 2 pi)``. Expectations are weighted sums over a
fixed :class:`~rotvi.quadrature.QuadratureSet`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, SingularMapError
from .quadrature import QuadratureSet
from .target import LOG_2PI, Potential
from .transport import (
    DEFAULT_FLOOR,
    DEFAULT_TANH_GRID,
    Dictionary,
    GramMatrix,
    SeparableMapParams,
    lower_bounds,
    map_forward,
    project_lambda,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Objective value, its standard error and all gradients at one parameter point."""

    kl: float
    se: float
    exact: bool
    grad_lam: np.ndarray
    grad_shift: np.ndarray
    rot_grad: np.ndarray  # unconstrained gradient G(O) w.r.t. O
    pointwise: np.ndarray = field(repr=False)


class KLObjective:
    """``(theta, O) -> KL((O o T_theta)_# rho || pi)`` on a fixed point set.

    Dictionary features at the quadrature points are computed once, so each
    evaluation is a handful of contractions.
    """

    def __init__(self, potential: Potential, quad: QuadratureSet, dictionary: Dictionary):
        if quad.dim != potential.dim:
            raise InputError("quadrature and potential dimensions differ")
        self.potential = potential
        self.quad = quad
        self.dictionary = dictionary
        self.dim = potential.dim
        vals, ders = dictionary.features(quad.points)
        # (d, N, K) for map evaluation and (d, K, N) for gradient contractions
        self._F = np.ascontiguousarray(vals.transpose(1, 0, 2))
        self._Fp = np.ascontiguousarray(ders.transpose(1, 0, 2))
        self._Ft = np.ascontiguousarray(vals.transpose(1, 2, 0))
        self._Fpt = np.ascontiguousarray(ders.transpose(1, 2, 0))
        self.weights = quad.weights
        const = -0.5 * self.dim * (1.0 + LOG_2PI)
        self.exact = potential.log_normalizer is not None
        self.constant = const + (potential.log_normalizer if self.exact else 0.0)

    def evaluate(self, theta: SeparableMapParams, O: Optional[np.ndarray] = None) -> Evaluation:
        O = np.eye(self.dim) if O is None else np.asarray(O, dtype=float)
        T = theta.shift + (self._F @ theta.lam[:, :, None])[..., 0].T
        dT = (self._Fp @ theta.lam[:, :, None])[..., 0].T
        if np.any(dT <= 0):
            raise SingularMapError("transport map has a non-positive derivative at a quadrature point")
        V, gV = self.potential.evaluate(T @ O.T)
        g = gV @ O  # rows are O^T grad V(O T(x))
        w = self.weights
        ell = V - np.sum(np.log(dT), axis=1)
        kl = float(w @ ell) + self.constant
        grad_shift = w @ g
        wg = (w[:, None] * g).T[:, :, None]
        winv = (w[:, None] / dT).T[:, :, None]
        grad_lam = (self._Ft @ wg)[..., 0] - (self._Fpt @ winv)[..., 0]
        rot_grad = (gV * w[:, None]).T @ T
        if self.quad.is_monte_carlo:
            n = len(ell)
            se = float(np.std(ell, ddof=1) / math.sqrt(n))
        else:
            se = 0.0
        return Evaluation(kl, se, self.exact, grad_lam, grad_shift, rot_grad, ell)

    def value(self, theta: SeparableMapParams, O: Optional[np.ndarray] = None) -> float:
        return self.evaluate(theta, O).kl

    def entropy_curvature(self, theta: SeparableMapParams) -> np.ndarray:
        """Hessian of ``-E[sum_i log T_i'(x_i)]`` in ``lam``, one ``(K, K)`` block per coordinate.

        Block ``i`` is ``E[F_i' F_i'^T / T_i'^2]``; it is positive semidefinite
        and blows up where the map is nearly flat.
        """
        dT = (self._Fp @ theta.lam[:, :, None])[..., 0]
        scaled = (self.weights / dT**2)[:, :, None] * self._Fp
        H = self._Fpt @ scaled
        return 0.5 * (H + H.transpose(0, 2, 1))


def kl_objective(theta: SeparableMapParams, O, potential: Potential, quad: QuadratureSet) -> float:
    """KL of ``(O o T_theta)_# rho`` to ``pi``; up to ``log Z`` if the potential has none."""
    return KLObjective(potential, quad, theta.dictionary).value(theta, O)


def grad_v(theta: SeparableMapParams, O, potential: Potential, quad: QuadratureSet) -> np.ndarray:
    return KLObjective(potential, quad, theta.dictionary).evaluate(theta, O).grad_shift


def grad_lambda(theta: SeparableMapParams, O, potential: Potential, quad: QuadratureSet) -> np.ndarray:
    return KLObjective(potential, quad, theta.dictionary).evaluate(theta, O).grad_lam


# --------------------------------------------------------------------------
# Projected gradient step
# --------------------------------------------------------------------------


@dataclass(eq=False)
class MfviState:
    """Mutable optimizer state, owned by a single driver loop.

    ``metric`` selects the inner product that preconditions the coefficient
    step and defines the projection:

    * ``"gram"``: ``L Q``, the fixed Gram matrix scaled by the smoothness
      constant. With ``line_search`` off every step is exactly
      ``(eta / L) Q^{-1} grad``.
    * ``"curvature"``: ``L Q + E[F' F'^T / T'^2]`` per coordinate, i.e. the
      Gram term plus the exact Hessian of the entropy term, re-evaluated at
      every iterate. This stays well conditioned when a map is nearly flat
      somewhere, where the fixed metric needs vanishing steps.

    ``active`` optionally restricts the step to a subset of dictionary
    entries (the identity must be included); the others are held at zero.

    The step multiplier is ``s`` times the inverse metric; ``s`` starts at
    ``eta`` and, with the line search on, adapts by backtracking and never
    exceeds ``step_cap`` (default ``eta``).
    """

    theta: SeparableMapParams
    gram: GramMatrix
    eta: float = 0.001
    L: float = 1.0
    floor: float = DEFAULT_FLOOR
    line_search: bool = True
    iteration: int = 0
    kl_trace: list = field(default_factory=list)
    step: Optional[float] = None
    current: Optional[Evaluation] = None
    stalled: bool = False
    step_cap: Optional[float] = None
    streak: int = 0  # consecutive steps accepted without backtracking
    metric: str = "curvature"
    active: Optional[np.ndarray] = None  # entries allowed to move; the rest stay at 0

    def __post_init__(self):
        if not (self.eta > 0 and self.L > 0):
            raise InputError("step size and smoothness constant must be positive")
        if self.metric not in METRICS:
            raise InputError(f"metric must be one of {METRICS}")
        if self.step is None:
            self.step = self.eta
        if self.active is not None:
            self.active = np.asarray(self.active, dtype=bool)
            if self.active.shape != (len(self.theta.dictionary),) or not self.active[0]:
                raise InputError("active mask must cover the dictionary and include the identity")

    @property
    def max_step(self) -> float:
        if self.line_search and self.step_cap is not None:
            return self.step_cap
        return self.eta

    @property
    def lower(self) -> np.ndarray:
        return lower_bounds(self.theta.dictionary, self.floor)


METRICS = ("curvature", "gram")
_ARMIJO = 1e-4
_MAX_HALVINGS = 40
_GROW_AFTER = 5


def _step_metric(state: MfviState, objective: KLObjective) -> np.ndarray:
    """``(d, K, K)`` metric blocks for the coefficient step at the current iterate."""
    base = state.L * state.gram.matrix
    if state.metric == "gram":
        return np.broadcast_to(base, (state.theta.dim,) + base.shape)
    return base + objective.entropy_curvature(state.theta)


def mfvi_step(state: MfviState, O, objective: KLObjective) -> MfviState:
    """One projected, preconditioned gradient step on ``(lam, v)``.

    ``lam <- proj_P(lam - s P^{-1} grad_lam)`` and ``v <- v - (s / L) grad_v``
    where ``P`` is the metric chosen by ``state.metric`` (``L Q`` reproduces
    the plain Gram-preconditioned step). With the line search on, ``s`` starts
    at the previous accepted step (doubled, up to ``step_cap``, after a streak
    of steps accepted without backtracking) and is halved until the Armijo
    condition holds. The state is updated in place and returned.
    """
    cur = state.current if state.current is not None else objective.evaluate(state.theta, O)
    theta = state.theta
    lower = state.lower
    act = np.ones(len(lower), dtype=bool) if state.active is None else state.active
    P = _step_metric(state, objective)[:, act][:, :, act]
    pre = np.linalg.solve(P, cur.grad_lam[:, act, None])[..., 0]
    hint = (theta.lam - lower > 0)[:, act]
    if state.line_search:
        grow = 2.0 if state.streak >= _GROW_AFTER else 1.0
        s = min(state.max_step, grow * state.step)
    else:
        s = state.max_step
    s0 = s
    for _ in range(_MAX_HALVINGS):
        lam = np.zeros_like(theta.lam)
        for i, row in enumerate(theta.lam[:, act] - s * pre):
            lam[i, act] = project_lambda(row, P[i], lower[act], hint=hint[i:i + 1])[0]
        shift = theta.shift - (s / state.L) * cur.grad_shift
        cand = theta.with_values(lam, shift)
        try:
            new = objective.evaluate(cand, O)
        except SingularMapError:
            if not state.line_search:
                raise
            s *= 0.5
            continue
        if not state.line_search:
            break
        decrease = np.sum(cur.grad_lam * (lam - theta.lam)) + cur.grad_shift @ (shift - theta.shift)
        if new.kl <= cur.kl + _ARMIJO * min(decrease, 0.0):
            break
        s *= 0.5
    else:
        # no acceptable step: stationary up to round-off on this point set
        state.stalled = True
        state.current = cur
        state.iteration += 1
        state.kl_trace.append(cur.kl)
        return state
    state.theta = cand
    state.current = new
    state.streak = state.streak + 1 if s == s0 else 0
    state.step = s
    state.iteration += 1
    state.stalled = False
    state.kl_trace.append(new.kl)
    return state


@dataclass
class MfviConfig:
    eta: float = 0.001
    L: Optional[float] = None
    max_iter: int = 20_000
    tol: float = 1e-8
    window: int = 50
    quadrature: str = "mc:4096"
    n_eval: int = 16_384
    seed: int = 0
    init_shift_sd: float = 0.1
    floor: float = DEFAULT_FLOOR
    tau: float = 1e-8
    line_search: bool = True
    # with the line search on, steps may grow up to step_scale * eta
    step_scale: float = 1000.0
    metric: str = "curvature"
    warmup_alphas: tuple = (8.0,)
    restarts: int = 8
    dictionary: tuple = DEFAULT_TANH_GRID


@dataclass(eq=False)
class MfviResult:
    """Fitted map with its KL estimate on an independent evaluation pool."""

    theta: SeparableMapParams
    kl: float
    kl_se: float
    exact: bool
    kl_trace: np.ndarray
    iterations: int
    restart_kls: list
    O: np.ndarray = field(default=None, repr=False)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return map_forward(self.theta, rng.standard_normal((n, self.theta.dim)))


def stalled(trace: list, window: int, tol: float) -> bool:
    """True when the best value improved by less than ``tol`` over the last ``window`` entries."""
    if len(trace) <= window:
        return False
    return min(trace[:-window]) - min(trace[-window:]) < tol


def as_potential(target) -> tuple[Potential, float]:
    """Accept a :class:`MixtureTarget` or a bare :class:`Potential`.

    Returns the potential and a default smoothness constant: the largest
    component-precision eigenvalue for mixtures, 1 otherwise.
    """
    if isinstance(target, Potential):
        return target, 1.0
    if hasattr(target, "potential") and hasattr(target, "smoothness"):
        return target.potential(), target.smoothness()
    raise InputError(f"cannot build a potential from {type(target).__name__}")


def run_mfvi(target, config: Optional[MfviConfig] = None) -> MfviResult:
    """Fit a product measure, i.e. the rotation held at the identity.

    Each restart starts at the identity map with a ``N(0, init_shift_sd^2)``
    shift and runs projected-gradient steps until the objective improves by
    less than ``tol`` over ``window`` steps or ``max_iter`` is reached. The
    best iterate of the restart with the lowest held-out KL is returned.
    """
    from .rovi import RoviConfig, run_rovi

    config = MfviConfig() if config is None else config
    rc = RoviConfig(
        eta_mf=config.eta, L=config.L, max_iter=config.max_iter, restarts=config.restarts,
        quadrature=config.quadrature, n_eval=config.n_eval, seed=config.seed, tol=config.tol,
        window=config.window, init_shift_sd=config.init_shift_sd, floor=config.floor, tau=config.tau,
        line_search=config.line_search, step_scale=config.step_scale, metric=config.metric, warmup_alphas=config.warmup_alphas, dictionary=config.dictionary,
        fixed_rotation=True,
    )
    res = run_rovi(target, rc)
    return MfviResult(res.theta, res.kl, res.kl_se, res.exact, res.best_trace, res.iterations, res.restart_kls, res.O)
