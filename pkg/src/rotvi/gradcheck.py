"""Finite-difference checks of the analytic gradients of the KL objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .mfvi import KLObjective, as_potential
from .quadrature import QuadratureSet, gauss_hermite
from .rotation import random_orthogonal, tangent_project
from .transport import Dictionary, SeparableMapParams


@dataclass
class GradCheckReport:
    lam_errors: list = field(default_factory=list)
    shift_errors: list = field(default_factory=list)
    rotation_errors: list = field(default_factory=list)

    @property
    def max_lam_error(self) -> float:
        return max(self.lam_errors, default=0.0)

    @property
    def max_shift_error(self) -> float:
        return max(self.shift_errors, default=0.0)

    @property
    def max_rotation_error(self) -> float:
        return max(self.rotation_errors, default=0.0)

    def passed(self, tol_euclid: float = 1e-4, tol_rot: float = 1e-3) -> bool:
        return self.max_lam_error <= tol_euclid and self.max_shift_error <= tol_euclid and self.max_rotation_error <= tol_rot

    def to_dict(self) -> dict:
        return {
            "points": len(self.lam_errors),
            "max_lambda_rel_error": self.max_lam_error,
            "max_shift_rel_error": self.max_shift_error,
            "max_rotation_rel_error": self.max_rotation_error,
        }


def relative_error(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-8) -> float:
    approx, exact = np.asarray(approx, float), np.asarray(exact, float)
    return float(np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), floor))


def random_params(dictionary: Dictionary, d: int, rng: np.random.Generator) -> SeparableMapParams:
    """A generic interior parameter point: identity weight in [0.5, 1.5], others in [0.05, 0.5]."""
    lam = rng.uniform(0.05, 0.5, size=(d, len(dictionary)))
    lam[:, 0] = rng.uniform(0.5, 1.5, size=d)
    return SeparableMapParams(dictionary, lam, rng.normal(0.0, 1.0, size=d))


def fd_lambda_shift(obj: KLObjective, theta: SeparableMapParams, O: np.ndarray, h: float = 1e-5):
    """Centered differences of the objective in every coefficient and shift entry."""
    g_lam = np.zeros_like(theta.lam)
    for idx in np.ndindex(theta.lam.shape):
        e = np.zeros_like(theta.lam)
        e[idx] = h
        g_lam[idx] = (obj.value(theta.with_values(lam=theta.lam + e), O) - obj.value(theta.with_values(lam=theta.lam - e), O)) / (2 * h)
    g_v = np.zeros_like(theta.shift)
    for i in range(theta.dim):
        e = np.zeros_like(theta.shift)
        e[i] = h
        g_v[i] = (obj.value(theta.with_values(shift=theta.shift + e), O) - obj.value(theta.with_values(shift=theta.shift - e), O)) / (2 * h)
    return g_lam, g_v


def fd_rotation_directional(obj: KLObjective, theta, O: np.ndarray, omega: np.ndarray, h: float = 1e-5) -> float:
    """``d/dt KL(theta, O exp(t omega))`` at ``t = 0`` by centered differences."""
    plus = obj.value(theta, O @ expm(h * omega))
    minus = obj.value(theta, O @ expm(-h * omega))
    return (plus - minus) / (2 * h)


def check_gradients(
    target,
    n_points: int = 20,
    seed: int = 0,
    quad: QuadratureSet | None = None,
    dictionary: Dictionary | None = None,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic and finite-difference gradients at random points.

    For each point, draws an interior ``theta``, a random rotation and a
    random skew generator; records the relative errors of the coefficient
    and shift gradients and of the Riemannian directional derivative
    ``<P_O(G), O Omega>_F``.
    """
    potential, _ = as_potential(target)
    d = potential.dim
    quad = gauss_hermite(d, 40) if quad is None else quad
    dictionary = Dictionary.default() if dictionary is None else dictionary
    obj = KLObjective(potential, quad, dictionary)
    rng = np.random.default_rng(seed)
    rep = GradCheckReport()
    for _ in range(n_points):
        theta = random_params(dictionary, d, rng)
        O = random_orthogonal(d, rng)
        ev = obj.evaluate(theta, O)
        g_lam, g_v = fd_lambda_shift(obj, theta, O, h)
        rep.lam_errors.append(relative_error(ev.grad_lam, g_lam))
        rep.shift_errors.append(relative_error(ev.grad_shift, g_v))
        A = rng.standard_normal((d, d))
        omega = A - A.T
        analytic = float(np.sum(tangent_project(O, ev.rot_grad) * (O @ omega)))
        fd = fd_rotation_directional(obj, theta, O, omega, h)
        # the floor keeps round-off from dominating when the derivative vanishes (rotation-invariant targets)
        rep.rotation_errors.append(abs(fd - analytic) / max(abs(analytic), 1e-6))
    return rep
