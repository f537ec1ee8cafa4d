"""Closed-form calculators for mode-collapse bounds and Gaussian KL identities.

Everything here is cheap and deterministic; the fitted models in
:mod:`rotvi.mfvi` and :mod:`rotvi.rovi` are checked against these numbers.

Conventions: a two-component target is ``pi = w P_0 + (1 - w) P_1``. A
separation certificate names two coordinates ``j != k`` with offsets and
signs; the half-spaces are ``H_i^- = {s_i x_i < b_i}`` (where ``P_0`` should
live) and ``H_i^+ = {s_i x_i > b_i}`` (where ``P_1`` should live).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np

from .errors import InputError, TheoremInapplicable

_STD = NormalDist()


# --------------------------------------------------------------------------
# Standard normal
# --------------------------------------------------------------------------


def normal_cdf(x):
    """``Phi(x)`` through ``erfc``, accurate in both tails."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))
    return np.vectorize(lambda t: 0.5 * math.erfc(-t / math.sqrt(2.0)), otypes=[float])(x)


def normal_sf(x):
    """Upper tail ``1 - Phi(x)`` without cancellation."""
    return normal_cdf(-np.asarray(x, dtype=float)) if np.ndim(x) else normal_cdf(-float(x))


def normal_quantile(p):
    """``Phi^{-1}(p)`` for ``p`` in ``(0, 1)``."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise InputError("quantile argument must lie strictly between 0 and 1")
    if arr.ndim == 0:
        return _STD.inv_cdf(float(arr))
    return np.vectorize(_STD.inv_cdf, otypes=[float])(arr)


# --------------------------------------------------------------------------
# Collapse bounds
# --------------------------------------------------------------------------


def collapse_bound(eps: float, b: float) -> float:
    """Upper bound ``sqrt(r) - r`` with ``r = b / (2 log(1/eps))`` on the smaller quadrant mass.

    Requires ``0 <= eps <= exp(-2 b)``; the value then lies in ``[0, 1/4]``
    and equals ``1/4`` at the right end point. ``eps = 0`` returns the limit 0.

    Raises:
        TheoremInapplicable: if ``eps > exp(-2 b)``.
    """
    if not b > 0:
        raise InputError("b must be positive")
    if not 0 <= eps < 1:
        raise InputError("eps must lie in [0, 1)")
    if eps > math.exp(-2.0 * b) * (1.0 + 1e-12):
        raise TheoremInapplicable(f"eps = {eps:.4g} exceeds exp(-2b) = {math.exp(-2 * b):.4g}")
    if eps == 0:
        return 0.0
    r = min(b / (2.0 * math.log(1.0 / eps)), 0.25)
    return math.sqrt(r) - r


def mixture_component_kl_bound(w: float) -> float:
    """``min(-log w, -log(1 - w))``: the KL of a product-measure component to the mixture."""
    if not 0 < w < 1:
        raise InputError("w must lie in (0, 1)")
    return min(-math.log(w), -math.log1p(-w))


def b_surrogate(weights, component_kls) -> float:
    """Computable upper bound on ``b = log 2 + inf_mu KL(mu || pi)``.

    A product measure ``mu`` approximating component ``i`` has
    ``KL(mu || pi) <= KL(mu || P_i) - log w_i``, so
    ``b <= log 2 + min_i [inf KL(. || P_i) - log w_i]``.
    """
    w = np.asarray(weights, dtype=float)
    kls = np.asarray(component_kls, dtype=float)
    if w.shape != kls.shape or np.any(w <= 0) or np.any(w >= 1):
        raise InputError("need one weight in (0, 1) per component KL")
    return math.log(2.0) + float(np.min(kls - np.log(w)))


def gaussian_separation_epsilon(m_j: float, m_k: float) -> float:
    """``1 - Phi(|m_j|) Phi(|m_k|)``, evaluated through the upper tails."""
    a, c = normal_sf(abs(m_j)), normal_sf(abs(m_k))
    return a + c - a * c


def gaussian_mean_threshold(delta: float, w: float) -> float:
    """Smallest ``min(|m_j|, |m_k|)`` that forces the smaller quadrant mass below ``delta``.

    ``beta = 1 - exp(-(2 log 2 - 2 max(log w, log(1-w))) / (1 - sqrt(1 - 4 delta))^2)``
    and the threshold is ``Phi^{-1}(sqrt(beta))``.
    """
    if not 0 < delta <= 0.25:
        raise InputError("delta must lie in (0, 1/4]")
    if not 0 < w < 1:
        raise InputError("w must lie in (0, 1)")
    num = 2.0 * math.log(2.0) - 2.0 * max(math.log(w), math.log1p(-w))
    den = (1.0 - math.sqrt(1.0 - 4.0 * delta)) ** 2
    one_minus_beta = math.exp(-num / den)
    # Phi^{-1}(sqrt(beta)) = -Phi^{-1}(1 - sqrt(beta)); keep the tail exact
    tail = -math.expm1(0.5 * math.log1p(-one_minus_beta))
    if tail <= 0:
        return math.inf
    return -normal_quantile(tail)


def phase_transition_weight(kl0: float, kl1: float) -> float:
    """``w* = kl0 / (kl0 + kl1)`` from the best product-measure KLs to each component.

    Raises:
        TheoremInapplicable: when ``kl0 + kl1 == 0`` (both components are
            themselves product measures).
    """
    if kl0 < 0 or kl1 < 0:
        raise InputError("KL values must be nonnegative")
    if kl0 + kl1 <= 0:
        raise TheoremInapplicable("w* is undefined when both components are exactly representable")
    return kl0 / (kl0 + kl1)


def collapsed_kl(w: float, kl0: float, kl1: float) -> tuple[float, float]:
    """KL to ``pi`` of the best product fit of each component, for well-separated components.

    Returns ``(kl0 - log w, kl1 - log(1 - w))``; the MFVI optimizer sits on
    the component with the smaller entry.
    """
    if not 0 < w < 1:
        raise InputError("w must lie in (0, 1)")
    return kl0 - math.log(w), kl1 - math.log1p(-w)


def preferred_component(w: float, kl0: float, kl1: float) -> int:
    """Index (0 or 1) of the component a collapsed MFVI fit occupies; ties go to 0."""
    a, c = collapsed_kl(w, kl0, kl1)
    return 0 if a <= c else 1


# --------------------------------------------------------------------------
# Gaussian KL identities
# --------------------------------------------------------------------------


def _spd(S, name="covariance") -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise InputError(f"{name} must be a symmetric matrix")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise InputError(f"{name} is not positive definite") from None
    return S


def _logdet(S: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(S)))))


def kl_gaussian(m0, S0, m1, S1) -> float:
    """``KL(N(m0, S0) || N(m1, S1))``."""
    m0, m1 = np.atleast_1d(np.asarray(m0, dtype=float)), np.atleast_1d(np.asarray(m1, dtype=float))
    S0, S1 = _spd(S0), _spd(S1)
    d = len(m0)
    if S0.shape != (d, d) or S1.shape != (d, d) or m1.shape != (d,):
        raise InputError("inconsistent Gaussian dimensions")
    dm = m0 - m1
    sol = np.linalg.solve(S1, np.column_stack([S0, dm]))
    val = 0.5 * (_logdet(S1) - _logdet(S0) + np.trace(sol[:, :d]) - d + dm @ sol[:, d])
    return max(float(val), 0.0)


def mfvi_gaussian_kl(S) -> float:
    """Smallest KL from a product measure to ``N(0, S)``.

    The optimum is Gaussian with precision ``diag(S^{-1})``, which gives
    ``(log det S + sum_i log (S^{-1})_ii) / 2``.
    """
    S = _spd(S)
    prec = np.linalg.inv(S)
    return max(0.5 * (_logdet(S) + float(np.sum(np.log(np.diag(prec))))), 0.0)


def rovi_gaussian_bound(m0, m1, S) -> tuple[float, np.ndarray]:
    """Upper bound on the best rotated-product KL for ``w N(m0, S) + (1-w) N(m1, S)``.

    Returns ``(bound, U)`` where the columns of ``U`` are the frame
    ``v_1 = (m1 - m0)/|m1 - m0|`` followed by eigenvectors of
    ``(I - v1 v1^T) S^{-1} (I - v1 v1^T)`` orthogonal to ``v_1``. When the
    means coincide, the bound is 0 and ``U`` is an eigenbasis of ``S``.
    """
    S = _spd(S)
    m0, m1 = np.asarray(m0, dtype=float).reshape(-1), np.asarray(m1, dtype=float).reshape(-1)
    d = S.shape[0]
    if m0.shape != (d,) or m1.shape != (d,):
        raise InputError("inconsistent dimensions")
    diff = m1 - m0
    if np.linalg.norm(diff) < 1e-14:
        _, U = np.linalg.eigh(S)
        return 0.0, U
    prec = np.linalg.inv(S)
    v1 = diff / np.linalg.norm(diff)
    P = np.eye(d) - np.outer(v1, v1)
    M = P @ prec @ P
    _, vecs = np.linalg.eigh(0.5 * (M + M.T))
    # drop the eigenvector closest to v1 (its eigenvalue is zero)
    drop = int(np.argmax(np.abs(vecs.T @ v1)))
    rest = np.delete(vecs, drop, axis=1)
    # re-orthogonalize against v1 to remove round-off
    rest = rest - np.outer(v1, v1 @ rest)
    rest, _ = np.linalg.qr(rest)
    U = np.column_stack([v1, rest])
    q = np.einsum("ij,ik,kj->j", U, prec, U)
    bound = 0.5 * (_logdet(S) + float(np.sum(np.log(q))))
    return max(bound, 0.0), U


@dataclass
class BoundCertificate:
    bound: float
    kl_estimate: float
    kl_se: float
    certified: bool


def certify_rovi_bound(m0, m1, S, w: float, n: int = 100_000, rng: Optional[np.random.Generator] = None) -> BoundCertificate:
    """Monte Carlo check that the constructed rotated product measure meets the bound.

    With the frame ``U`` from :func:`rovi_gaussian_bound` and
    ``D = diag(1 / v_i^T S^{-1} v_i)``, the measure
    ``mu = w N(U^T m0, D) + (1-w) N(U^T m1, D)`` is a product (its means
    differ only in the first coordinate). ``KL(U_# mu || pi)`` is estimated on
    ``n`` draws and compared with ``bound + 2 SE``.
    """
    from .target import MixtureTarget, mixture_log_density, sample_mixture

    rng = np.random.default_rng(0) if rng is None else rng
    bound, U = rovi_gaussian_bound(m0, m1, S)
    S = _spd(S)
    prec = np.linalg.inv(S)
    D = np.diag(1.0 / np.einsum("ij,ik,kj->j", U, prec, U))
    m0, m1 = np.asarray(m0, dtype=float), np.asarray(m1, dtype=float)
    mu = MixtureTarget.from_arrays([w, 1 - w], [U.T @ m0, U.T @ m1], [D, D])
    pi = MixtureTarget.from_arrays([w, 1 - w], [m0, m1], [S, S])
    y = sample_mixture(mu, n, rng)
    ell = mixture_log_density(mu, y) - mixture_log_density(pi, y @ U.T)
    est = float(np.mean(ell))
    se = float(np.std(ell, ddof=1) / math.sqrt(n))
    return BoundCertificate(bound, est, se, est <= bound + 2 * se)


# --------------------------------------------------------------------------
# Separation certificates and quadrant masses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SeparationCertificate:
    """Two axis half-space pairs that (approximately) separate ``P_0`` from ``P_1``."""

    j: int
    k: int
    b_j: float
    b_k: float
    s_j: int
    s_k: int
    epsilon: float

    def __post_init__(self):
        if self.j == self.k:
            raise InputError("a certificate needs two distinct coordinates")
        if self.s_j not in (-1, 1) or self.s_k not in (-1, 1):
            raise InputError("signs must be +1 or -1")
        if not 0 <= self.epsilon < 1:
            raise InputError("epsilon must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def quadrant_mass(source, certificate: SeparationCertificate) -> tuple[float, float]:
    """``(mu(H_j^- & H_k^-), mu(H_j^+ & H_k^+))``.

    ``source`` is either an ``(n, d)`` sample matrix (empirical frequencies)
    or a sequence of ``d`` marginal CDFs of a product measure, each a
    callable ``x -> P(X_i <= x)``.
    """
    c = certificate
    if isinstance(source, (list, tuple)) and source and callable(source[0]):
        # product formula from marginal CDFs
        def lower_mass(i, b, s):
            F = source[i](b)
            return F if s == 1 else 1.0 - F

        a_j, a_k = lower_mass(c.j, c.b_j, c.s_j), lower_mass(c.k, c.b_k, c.s_k)
        return a_j * a_k, (1.0 - a_j) * (1.0 - a_k)
    x = np.asarray(source, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("need a non-empty (n, d) sample matrix or a list of marginal CDFs")
    zj = c.s_j * x[:, c.j]
    zk = c.s_k * x[:, c.k]
    minus = float(np.mean((zj < c.b_j) & (zk < c.b_k)))
    plus = float(np.mean((zj > c.b_j) & (zk > c.b_k)))
    return minus, plus


def product_quadrant_mass(a_j_minus: float, a_k_minus: float) -> tuple[float, float]:
    """Quadrant masses of a product measure from its two lower half-space masses."""
    return a_j_minus * a_k_minus, (1.0 - a_j_minus) * (1.0 - a_k_minus)


def gaussian_product_separation(target) -> SeparationCertificate:
    """Best midpoint certificate for two Gaussian components with diagonal covariances.

    Searches coordinate pairs with distinct means, puts each offset at the
    midpoint of the two means and orients each sign so that ``P_0`` sits in
    ``H^-``. The achieved epsilon is computed from exact normal CDFs.

    Raises:
        InputError: wrong number of components, non-diagonal covariances, or
            fewer than two coordinates with distinct means.
    """
    comps = target.components
    if len(comps) != 2:
        raise InputError("separation certificates need exactly two components")
    for c in comps:
        off = c.covariance - np.diag(np.diag(c.covariance))
        if np.any(np.abs(off) > 1e-12):
            raise InputError("separation certificates need diagonal (product) covariances")
    m0, m1 = comps[0].mean, comps[1].mean
    sd0 = np.sqrt(np.diag(comps[0].covariance))
    sd1 = np.sqrt(np.diag(comps[1].covariance))
    coords = [i for i in range(target.dim) if abs(m1[i] - m0[i]) > 1e-12]
    if len(coords) < 2:
        raise InputError("need two coordinates along which the component means differ")

    best = None
    for j, k in itertools.combinations(coords, 2):
        s = {i: 1 if m1[i] > m0[i] else -1 for i in (j, k)}
        b = {i: s[i] * 0.5 * (m0[i] + m1[i]) for i in (j, k)}

        # 1 - P_0(H_j^- & H_k^-) and 1 - P_1(H_j^+ & H_k^+) from the per-axis tails
        t0 = [normal_sf((b[i] - s[i] * m0[i]) / sd0[i]) for i in (j, k)]
        t1 = [normal_sf((s[i] * m1[i] - b[i]) / sd1[i]) for i in (j, k)]
        eps = max(t0[0] + t0[1] - t0[0] * t0[1], t1[0] + t1[1] - t1[0] * t1[1])
        if best is None or eps < best.epsilon:
            best = SeparationCertificate(j, k, float(b[j]), float(b[k]), s[j], s[k], float(eps))
    return best


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class BoundReport:
    """All closed-form quantities available for one mixture target."""

    weights: list
    component_kls: list
    b_surrogate: Optional[float] = None
    certificate: Optional[dict] = None
    epsilon: Optional[float] = None
    valid: bool = False
    collapse_bound: Optional[float] = None
    w_star: Optional[float] = None
    w_star_note: str = ""
    preferred_component: Optional[int] = None
    prop1_bound: Optional[float] = None
    prop1_rotation: Optional[list] = None
    mean_threshold: Optional[float] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(target, delta: float = 0.25) -> BoundReport:
    """Evaluate every applicable calculator for a one- or two-component Gaussian mixture."""
    comps = target.components
    w = [float(x) for x in target.weights]
    kls = [mfvi_gaussian_kl(c.covariance) for c in comps]
    rep = BoundReport(weights=w, component_kls=kls)
    if len(comps) == 1:
        rep.prop1_bound, U = rovi_gaussian_bound(comps[0].mean, comps[0].mean, comps[0].covariance)
        rep.prop1_rotation = U.tolist()
        rep.notes.append("single component: the mixture bounds do not apply")
        return rep
    if len(comps) != 2:
        rep.notes.append("bounds are implemented for two components only")
        return rep

    rep.b_surrogate = b_surrogate(w, kls)
    rep.preferred_component = preferred_component(w[0], kls[0], kls[1])
    try:
        rep.w_star = phase_transition_weight(kls[0], kls[1])
    except TheoremInapplicable as exc:
        rep.w_star_note = str(exc)
    try:
        cert = gaussian_product_separation(target)
        rep.certificate = cert.to_dict()
        rep.epsilon = cert.epsilon
        try:
            rep.collapse_bound = collapse_bound(cert.epsilon, rep.b_surrogate)
            rep.valid = True
        except TheoremInapplicable as exc:
            rep.notes.append(str(exc))
    except InputError as exc:
        rep.notes.append(f"no separation certificate: {exc}")
    if np.allclose(comps[0].covariance, comps[1].covariance, rtol=0, atol=1e-12):
        rep.prop1_bound, U = rovi_gaussian_bound(comps[0].mean, comps[1].mean, comps[0].covariance)
        rep.prop1_rotation = U.tolist()
    else:
        rep.notes.append("components have different covariances: no rotated-product bound")
    if 0 < w[0] < 1:
        rep.mean_threshold = gaussian_mean_threshold(delta, w[0])
    return rep
