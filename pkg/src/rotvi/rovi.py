"""Alternating minimization over (rotation, product measure), with restarts.

Each restart starts from the identity transport map (a small random shift)
and a random rotation, then alternates ``inner`` projected-gradient steps on
the map parameters with one retracted gradient step on the rotation. The
restart whose fit has the lowest KL on a fresh evaluation pool wins.
"""

from __future__ import annotations

import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, NumericalError
from .mfvi import KLObjective, MfviState, as_potential, mfvi_step, stalled
from .quadrature import QuadratureSet, monte_carlo, parse_quadrature
from .rotation import check_orthogonal, random_orthogonal, rotation_step_from_grad
from .transport import (
    DEFAULT_FLOOR,
    DEFAULT_TANH_GRID,
    DEFAULT_TAU,
    Dictionary,
    SeparableMapParams,
    build_gram,
    map_derivatives,
    map_forward,
)

log = logging.getLogger(__name__)

_MAX_ROTATION_HALVINGS = 6


@dataclass
class RoviConfig:
    """Solver settings. ``max_iter`` counts map-parameter steps over all rounds."""

    eta_mf: float = 0.001
    eta_o: float = 0.01
    L: Optional[float] = None
    inner: int = 25
    max_iter: int = 20_000
    restarts: int = 16
    quadrature: str = "mc:4096"
    n_eval: int = 16_384
    seed: int = 0
    tol: float = 1e-6
    window: int = 50
    init_shift_sd: float = 0.1
    floor: float = DEFAULT_FLOOR
    tau: float = DEFAULT_TAU
    line_search: bool = True
    step_scale: float = 1000.0
    # the rotation step may grow up to rotation_scale * eta_o (1 disables growth)
    rotation_scale: float = 100.0
    metric: str = "curvature"
    # first phase: only entries with alpha <= the warmup level move; restart r
    # uses warmup_alphas[r % len]. An empty tuple gives a single phase.
    warmup_alphas: tuple = (8.0, 4.0)
    dictionary: tuple = DEFAULT_TANH_GRID
    fixed_rotation: bool = False

    def __post_init__(self):
        if not (self.eta_mf > 0 and self.eta_o > 0):
            raise InputError("step sizes must be positive")
        self.warmup_alphas = tuple(float(a) for a in self.warmup_alphas)
        if any(not a > 0 for a in self.warmup_alphas):
            raise InputError("warmup levels must be positive")
        if self.restarts < 1 or self.inner < 1 or self.max_iter < 1:
            raise InputError("restarts, inner and max_iter must be at least 1")
        if not self.rotation_scale >= 1:
            raise InputError("rotation_scale must be at least 1")
        if self.L is not None and not self.L > 0:
            raise InputError("L must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dictionary"] = [{k: list(v) for k, v in block.items()} for block in self.dictionary]
        out["warmup_alphas"] = list(self.warmup_alphas)
        return out


@dataclass(eq=False)
class RestartResult:
    index: int
    O: np.ndarray
    theta: SeparableMapParams
    train_kl: float
    kl_trace: np.ndarray
    iterations: int
    timings: dict


@dataclass(eq=False)
class RoviResult:
    """Best (O, theta) over restarts together with all traces."""

    O: np.ndarray
    theta: SeparableMapParams
    kl: float
    kl_se: float
    exact: bool
    best_restart: int
    restart_kls: list
    traces: list
    best_trace: np.ndarray = field(default=None, repr=False)
    iterations: int = 0
    timings: dict = field(default_factory=dict)
    failed_restarts: list = field(default_factory=list)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draws from the fitted ``(O o T_theta)_# rho``."""
        z = rng.standard_normal((n, self.theta.dim))
        return map_forward(self.theta, z) @ self.O.T


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ROVI_THREADS", "1")))
    except ValueError:
        return 1


def _run_restart(index, potential, L, config: RoviConfig, quad: QuadratureSet, seed) -> RestartResult:
    dictionary = Dictionary.from_grid(config.dictionary)
    d = potential.dim
    rng = np.random.default_rng(seed)
    O = np.eye(d) if config.fixed_rotation else random_orthogonal(d, rng)
    theta = SeparableMapParams.identity(dictionary, d, config.init_shift_sd * rng.standard_normal(d))
    objective = KLObjective(potential, quad, dictionary)
    gram = build_gram(dictionary, d, tau=config.tau)
    state = MfviState(theta, gram, config.eta_mf, L, config.floor, config.line_search,
                      step_cap=config.step_scale * config.eta_mf, metric=config.metric)
    state.current = objective.evaluate(theta, O)
    state.kl_trace.append(state.current.kl)
    best = (state.current.kl, O, theta)
    eta_o = config.eta_o
    t_mf = t_rot = 0.0
    if config.warmup_alphas:
        level = config.warmup_alphas[index % len(config.warmup_alphas)]
        warm = np.array([e.kind == "identity" or e.alpha <= level for e in dictionary.entries])
        state.active = None if warm.all() else warm
    phase_start = 0

    while state.iteration < config.max_iter:
        t0 = time.perf_counter()
        for _ in range(config.inner):
            mfvi_step(state, O, objective)
            if state.current.kl < best[0]:
                best = (state.current.kl, O, state.theta)
            if state.stalled or state.iteration >= config.max_iter:
                break
        t1 = time.perf_counter()
        t_mf += t1 - t0
        rotated = False
        if not config.fixed_rotation:
            cur = state.current
            step = eta_o
            for attempt in range(_MAX_ROTATION_HALVINGS):
                O_new = rotation_step_from_grad(O, cur.rot_grad, step)
                new = objective.evaluate(state.theta, O_new)
                if new.kl <= cur.kl:
                    O, state.current, rotated = O_new, new, True
                    state.kl_trace.append(new.kl)
                    break
                step *= 0.5
            # next round: grow after a first-try success, otherwise keep the accepted size
            if rotated:
                eta_o = min(2.0 * step, config.rotation_scale * config.eta_o) if attempt == 0 else step
            else:
                eta_o = max(step, config.eta_o)
            if state.current.kl < best[0]:
                best = (state.current.kl, O, state.theta)
        t_rot += time.perf_counter() - t1
        done = (state.stalled and not rotated) or stalled(state.kl_trace[phase_start:], config.window, config.tol)
        if state.active is not None and (done or state.iteration >= config.max_iter // 2):
            # release the steep entries and continue from the smooth fit
            state.active, state.stalled, state.streak = None, False, 0
            phase_start = len(state.kl_trace)
            continue
        if done:
            break

    kl, O, theta = best
    timings = {"mfvi_seconds": t_mf, "rotation_seconds": t_rot}
    return RestartResult(index, O, theta, kl, np.array(state.kl_trace), state.iteration, timings)


def _restart_job(args):
    index, potential_spec, L, config, quad, seed = args
    potential, _ = as_potential(potential_spec)
    return _run_restart(index, potential, L, config, quad, seed)


def run_rovi(target, config: Optional[RoviConfig] = None) -> RoviResult:
    """Fit ``O_# mu`` to ``target`` over rotations ``O`` and product measures ``mu``.

    Args:
        target: a :class:`~rotvi.target.MixtureTarget` or a
            :class:`~rotvi.target.Potential`.
        config: solver settings; defaults to :class:`RoviConfig()`.

    Returns:
        The best restart, selected by its KL estimate on an independent
        Monte Carlo pool of ``config.n_eval`` points.
    """
    config = RoviConfig() if config is None else config
    potential, L_default = as_potential(target)
    L = L_default if config.L is None else config.L
    d = potential.dim
    ss = np.random.SeedSequence(config.seed)
    quad_seed, eval_seed, *restart_seeds = ss.spawn(config.restarts + 2)
    quad = parse_quadrature(config.quadrature, d, quad_seed)
    if quad.mode == "gh":
        nodes = np.unique(quad.points[:, 0])
        gap = float(np.min(np.diff(nodes))) if len(nodes) > 1 else np.inf
        steepest = max((float(a) for block in config.dictionary for a in block["alphas"]), default=0.0)
        if steepest * gap > 4.0:
            log.warning(
                "Gauss-Hermite nodes (spacing >= %.3g) do not resolve tanh steps with steepness %g; "
                "the optimizer can place steps between nodes. Use a Monte Carlo pool or a smoother dictionary.",
                gap, steepest,
            )

    t0 = time.perf_counter()
    results, failed = [], []
    n_threads = min(_threads(), config.restarts)
    if n_threads > 1:
        # workers rebuild the potential from the picklable target
        jobs = [(r, target, L, config, quad, restart_seeds[r]) for r in range(config.restarts)]
        with ProcessPoolExecutor(n_threads) as pool:
            futures = [pool.submit(_restart_job, job) for job in jobs]
            outcomes = []
            for r, fut in enumerate(futures):
                try:
                    outcomes.append(fut.result())
                except NumericalError as exc:
                    outcomes.append(exc)
    else:
        outcomes = []
        for r in range(config.restarts):
            try:
                outcomes.append(_run_restart(r, potential, L, config, quad, restart_seeds[r]))
            except NumericalError as exc:
                outcomes.append(exc)
    for r, out in enumerate(outcomes):
        if isinstance(out, Exception):
            warnings.warn(f"restart {r} dropped: {out}", RuntimeWarning, stacklevel=2)
            failed.append(r)
        else:
            results.append(out)
    if not results:
        raise NumericalError("every restart failed")
    t_fit = time.perf_counter() - t0

    eval_quad = monte_carlo(d, config.n_eval, eval_seed)
    evaluator = KLObjective(potential, eval_quad, Dictionary.from_grid(config.dictionary))
    scored = []
    for res in results:
        ev = evaluator.evaluate(res.theta, res.O)
        scored.append((ev.kl, res.index, ev, res))
    scored.sort(key=lambda s: (s[0], s[1]))
    _, best_idx, ev, res = scored[0]
    restart_kls = [s[0] for s in sorted(scored, key=lambda s: s[1])]
    timings = {
        "fit_seconds": t_fit,
        "evaluation_seconds": time.perf_counter() - t0 - t_fit,
        "mfvi_seconds": sum(r.timings["mfvi_seconds"] for r in results),
        "rotation_seconds": sum(r.timings["rotation_seconds"] for r in results),
    }
    log.info("rovi: best restart %d with kl=%.5f +- %.5f", best_idx, ev.kl, ev.se)
    return RoviResult(
        O=check_orthogonal(res.O),
        theta=res.theta,
        kl=ev.kl,
        kl_se=ev.se,
        exact=ev.exact,
        best_restart=best_idx,
        restart_kls=restart_kls,
        traces=[r.kl_trace for r in sorted(results, key=lambda r: r.index)],
        best_trace=res.kl_trace,
        iterations=res.iterations,
        timings=timings,
        failed_restarts=failed,
    )


def fit_summary(result: RoviResult, target, n_eval: int = 100_000, seed: int = 0) -> dict:
    """Diagnostics of a fitted model on fresh draws.

    Reports the stored KL estimate, mode masses (average component
    responsibilities of the fitted model's samples), the two quadrant masses
    of the separation certificate when the target admits one, the marginal
    moments of the fitted model, and whether the map is strictly increasing
    on the sample.
    """
    from . import theory
    from .target import MixtureTarget, mode_masses

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_eval, result.theta.dim))
    y = map_forward(result.theta, z)
    x = y @ result.O.T
    out = {
        "kl": result.kl,
        "kl_se": result.kl_se,
        "kl_exact": result.exact,
        "mean": x.mean(axis=0).tolist(),
        "covariance": np.cov(x, rowvar=False).reshape(result.theta.dim, -1).tolist(),
        "min_map_derivative": float(np.min(map_derivatives(result.theta, z))),
    }
    if isinstance(target, MixtureTarget):
        masses = mode_masses(target, x)
        out["mode_masses"] = masses.tolist()
        out["min_mode_mass"] = float(masses.min())
        try:
            cert = theory.gaussian_product_separation(target)
        except InputError:
            cert = None
        if cert is not None:
            out["quadrant_masses"] = list(theory.quadrant_mass(x, cert))
    return out

