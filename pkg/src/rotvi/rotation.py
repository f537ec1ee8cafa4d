"""Riemannian gradient steps on the orthogonal group O(d).

The rotation variable enters the objective only through ``V(O T_theta(x))``,
so its Euclidean gradient is ``G(O) = E[grad V(O T) T^T]``. A step projects
``G`` onto the tangent space at ``O``, moves along it and maps back to the
group with a sign-normalized QR factorization.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, InvariantViolation, NumericalError

ORTHO_TOL = 1e-10
_RANK_TOL = 1e-12


def orthogonality_defect(O: np.ndarray) -> float:
    """Frobenius norm of ``O^T O - I``."""
    O = np.asarray(O, dtype=float)
    return float(np.linalg.norm(O.T @ O - np.eye(O.shape[0])))


def check_orthogonal(O: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    O = np.asarray(O, dtype=float)
    if O.ndim != 2 or O.shape[0] != O.shape[1]:
        raise InputError(f"expected a square matrix, got shape {O.shape}")
    err = orthogonality_defect(O)
    if err > tol:
        raise InvariantViolation(f"matrix is not orthogonal: |O^T O - I|_F = {err:.3e}")
    return O


def rotation_grad(O, theta, potential, quad) -> np.ndarray:
    """Quadrature estimate of ``G(O) = sum_q w_q grad V(O T(x_q)) T(x_q)^T``."""
    from .mfvi import KLObjective

    return KLObjective(potential, quad, theta.dictionary).evaluate(theta, O).rot_grad


def tangent_project(O: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``(G - O G^T O) / 2``, the component of ``G`` tangent to O(d) at ``O``.

    ``O^T`` times the result is skew-symmetric.
    """
    O = check_orthogonal(O)
    G = np.asarray(G, dtype=float)
    if G.shape != O.shape:
        raise InputError("gradient and rotation shapes differ")
    return 0.5 * G - 0.5 * O @ G.T @ O


def qr_retract(M: np.ndarray) -> np.ndarray:
    """Q factor of ``M = QR`` with ``diag(R) > 0``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError("retraction needs a square matrix")
    Q, R = np.linalg.qr(M)
    r = np.diag(R)
    if np.min(np.abs(r)) < _RANK_TOL:
        raise NumericalError("retraction of a rank-deficient matrix")
    Q = Q * np.sign(r)  # flip columns so that R has a positive diagonal
    return check_orthogonal(Q)


def rotation_step_from_grad(O: np.ndarray, G: np.ndarray, eta: float) -> np.ndarray:
    """Retracted step ``qr(O - eta * P_O(G))`` for a given Euclidean gradient."""
    if not eta > 0:
        raise InputError("rotation step size must be positive")
    return qr_retract(O - eta * tangent_project(O, G))


def rotation_step(O, theta, potential, quad, eta: float = 0.01) -> np.ndarray:
    """One rotation step of the alternating scheme at fixed ``theta``."""
    return rotation_step_from_grad(O, rotation_grad(O, theta, potential, quad), eta)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Sign-normalized QR factor of a standard Gaussian matrix (Haar distributed).

    For ``d = 1`` the draw is still consumed but the result is always ``(1)``:
    the reflection ``(-1)`` is not used as a starting point.
    """
    if d < 1:
        raise InputError("dimension must be at least 1")
    M = rng.standard_normal((d, d))
    if d == 1:
        return np.ones((1, 1))
    return qr_retract(M)

