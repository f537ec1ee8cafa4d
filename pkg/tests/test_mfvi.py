import math

import numpy as np
import pytest

from rotvi.errors import InputError
from rotvi.gradcheck import check_gradients, random_params
from rotvi.mfvi import (
    KLObjective,
    MfviConfig,
    MfviState,
    grad_lambda,
    grad_v,
    kl_objective,
    mfvi_step,
    run_mfvi,
    stalled,
)
from rotvi.presets import get_preset
from rotvi.quadrature import gauss_hermite, monte_carlo
from rotvi.rotation import random_orthogonal
from rotvi.target import isotropic_mixture, quadratic_potential
from rotvi.theory import gaussian_product_separation, mfvi_gaussian_kl, quadrant_mass
from rotvi.transport import DEFAULT_FLOOR, Dictionary, DictionaryEntry, SeparableMapParams, build_gram

IDENTITY_ONLY = Dictionary((DictionaryEntry("identity"),))
# Gauss-Hermite nodes only resolve smooth steps; steep entries need a Monte Carlo pool
SMOOTH_GRID = ({"alphas": [0.5, 1.0], "betas": [-1.0, 0.0, 1.0]},)
SMOOTH = Dictionary.from_grid(SMOOTH_GRID)
FAST = dict(quadrature="gh:40", n_eval=16_384, dictionary=SMOOTH_GRID, restarts=1)


def scalar_map(a, b=0.0):
    return SeparableMapParams(IDENTITY_ONLY, np.array([[a]]), np.array([b]))


def one_d_kl(a):
    return 0.5 * (a * a - 1.0 - 2.0 * math.log(a))


class TestObjective:
    def test_identity_on_standard_normal_gh(self):
        theta = SeparableMapParams.identity(Dictionary.default(), 2)
        assert kl_objective(theta, np.eye(2), quadratic_potential(2), gauss_hermite(2, 40)) == pytest.approx(0.0, abs=1e-12)

    def test_identity_on_standard_normal_mc(self):
        obj = KLObjective(quadratic_potential(2), monte_carlo(2, 4096, 0), Dictionary.default())
        ev = obj.evaluate(SeparableMapParams.identity(Dictionary.default(), 2))
        assert abs(ev.kl) <= 3 * ev.se and ev.exact

    @pytest.mark.parametrize("a", [0.5, 2.0, 3.0])
    def test_affine_closed_form(self, a):
        kl = kl_objective(scalar_map(a), np.eye(1), quadratic_potential(1), gauss_hermite(1, 40))
        assert kl == pytest.approx(one_d_kl(a), abs=1e-12)
        if a == 2.0:
            assert kl == pytest.approx((3 - 2 * math.log(2)) / 2, abs=1e-12)

    def test_rotation_invariance_shared_points(self):
        target = get_preset("fig3e").target
        rng = np.random.default_rng(0)
        quad = monte_carlo(2, 4096, 1)
        for _ in range(5):
            theta = random_params(Dictionary.default(), 2, rng)
            O = random_orthogonal(2, rng)
            a = kl_objective(theta, O, target.potential(), quad)
            b = kl_objective(theta, np.eye(2), target.pushforward(O.T).potential(), quad)
            assert a == pytest.approx(b, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            KLObjective(quadratic_potential(3), gauss_hermite(2, 10), Dictionary.default())

    def test_entropy_curvature_is_hessian(self):
        # the potential term is linear in lam for a quadratic-free check: use FD of the entropy part only
        obj = KLObjective(quadratic_potential(1), gauss_hermite(1, 60), Dictionary.default())
        rng = np.random.default_rng(1)
        theta = random_params(Dictionary.default(), 1, rng)
        H = obj.entropy_curvature(theta)[0]
        dT = lambda lam: (obj._Fp @ lam[:, :, None])[..., 0].T
        grad_ent = lambda lam: -(obj._Fpt @ (obj.weights[:, None] / dT(lam)).T[:, :, None])[..., 0]
        h = 1e-6
        K = len(Dictionary.default())
        for k in (0, 5, K - 1):
            e = np.zeros_like(theta.lam)
            e[0, k] = h
            col = (grad_ent(theta.lam + e) - grad_ent(theta.lam - e))[0] / (2 * h)
            np.testing.assert_allclose(H[:, k], col, rtol=1e-5, atol=1e-7)
        assert np.all(np.linalg.eigvalsh(H) >= -1e-10)


class TestGradients:
    def test_grad_v_zero_at_optimum(self):
        theta = SeparableMapParams.identity(Dictionary.default(), 2)
        np.testing.assert_allclose(grad_v(theta, np.eye(2), quadratic_potential(2), gauss_hermite(2, 40)), 0.0, atol=1e-12)

    def test_grad_v_pulls_toward_mean(self):
        m = np.array([1.5, -0.5])
        target = isotropic_mixture([1.0], [m])
        theta = SeparableMapParams.identity(Dictionary.default(), 2)
        g = grad_v(theta, np.eye(2), target.potential(), gauss_hermite(2, 40))
        np.testing.assert_allclose(g, -m, atol=1e-10)
        obj = KLObjective(target.potential(), gauss_hermite(2, 40), Dictionary.default())
        h = 1e-5
        fd = [(obj.value(theta.with_values(shift=h * e)) - obj.value(theta.with_values(shift=-h * e))) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(g, fd, rtol=1e-6)

    @pytest.mark.parametrize("a", [0.3, 1.0, 2.0, 5.0])
    def test_grad_lambda_one_d(self, a):
        g = grad_lambda(scalar_map(a), np.eye(1), quadratic_potential(1), gauss_hermite(1, 40))
        assert g[0, 0] == pytest.approx(a - 1 / a, abs=1e-12)

    def test_stationary_point(self):
        # at the identity on N(0, I), E[T(x) x] = E[T'(x)] for every entry (Stein's identity)
        theta = SeparableMapParams.identity(SMOOTH, 2)
        ev = KLObjective(quadratic_potential(2), gauss_hermite(2, 40), SMOOTH).evaluate(theta)
        assert np.linalg.norm(ev.grad_lam) <= 1e-6
        assert np.linalg.norm(ev.grad_shift) <= 1e-6

    @pytest.mark.parametrize("name", ["fig3c", "fig3e"])
    def test_finite_differences(self, name):
        small = Dictionary.from_grid([{"alphas": [1.0, 4.0], "betas": [-1.0, 0.0, 1.0]}])
        rep = check_gradients(get_preset(name).target, n_points=20, seed=3, dictionary=small)
        assert rep.max_lam_error <= 1e-4
        assert rep.max_shift_error <= 1e-4


def make_state(target, theta, quad, **kw):
    pot = target.potential() if hasattr(target, "potential") else target
    obj = KLObjective(pot, quad, theta.dictionary)
    return MfviState(theta, build_gram(theta.dictionary), **kw), obj


class TestStep:
    def test_zero_gradient_leaves_state(self):
        theta = SeparableMapParams.identity(SMOOTH, 2)
        state, obj = make_state(quadratic_potential(2), theta, gauss_hermite(2, 40))
        mfvi_step(state, np.eye(2), obj)
        np.testing.assert_allclose(state.theta.lam, theta.lam, atol=1e-10)
        np.testing.assert_allclose(state.theta.shift, 0.0, atol=1e-10)

    @pytest.mark.parametrize("metric", ["gram", "curvature"])
    @pytest.mark.parametrize("line_search", [False, True])
    def test_one_d_monotone_toward_one(self, metric, line_search):
        state, obj = make_state(quadratic_potential(1), scalar_map(2.0), gauss_hermite(1, 40), metric=metric, line_search=line_search)
        path = [2.0]
        for _ in range(300):
            mfvi_step(state, np.eye(1), obj)
            path.append(state.theta.lam[0, 0])
        path = np.array(path)
        assert np.all(np.diff(path) < 0) or np.all(np.diff(path) <= 0) and path[-1] > 1.0
        assert np.all(path > 1.0 - 1e-9)

    def test_plain_step_matches_formula(self):
        eta, L = 0.001, 2.0
        state, obj = make_state(quadratic_potential(1), scalar_map(2.0), gauss_hermite(1, 40), eta=eta, L=L, metric="gram", line_search=False)
        mfvi_step(state, np.eye(1), obj)
        q = state.gram.matrix[0, 0]
        assert state.theta.lam[0, 0] == pytest.approx(2.0 - eta / (L * q) * (2.0 - 0.5), rel=1e-14)

    def test_log_concave_trace_non_increasing(self):
        target = get_preset("fig3a").target
        theta = SeparableMapParams.identity(SMOOTH, 2)
        state, obj = make_state(target, theta, gauss_hermite(2, 40), eta=0.001, L=target.smoothness())
        for _ in range(200):
            mfvi_step(state, np.eye(2), obj)
            assert np.all(state.theta.lam >= 0) and np.all(state.theta.lam[:, 0] >= DEFAULT_FLOOR)
        trace = np.array(state.kl_trace[10:])
        assert np.all(np.diff(trace) <= 1e-12)

    def test_active_mask_freezes_entries(self):
        target = get_preset("fig3b").target
        d = Dictionary.default()
        active = np.zeros(len(d), dtype=bool)
        active[:4] = True
        state, obj = make_state(target, SeparableMapParams.identity(d, 2), gauss_hermite(2, 40), L=1.0, active=active)
        for _ in range(50):
            mfvi_step(state, np.eye(2), obj)
        assert np.all(state.theta.lam[:, ~active] == 0.0)
        assert state.kl_trace[-1] < state.kl_trace[0]

    def test_invalid_state(self):
        theta = SeparableMapParams.identity(Dictionary.default(), 2)
        G = build_gram(Dictionary.default())
        with pytest.raises(InputError):
            MfviState(theta, G, eta=0.0)
        with pytest.raises(InputError):
            MfviState(theta, G, metric="euclid")
        with pytest.raises(InputError):
            MfviState(theta, G, active=np.zeros(len(theta.dictionary), dtype=bool))


class TestRun:
    def test_stalled_rule(self):
        assert not stalled([1.0] * 10, 50, 1e-8)
        assert stalled([1.0] * 100, 50, 1e-8)
        assert not stalled(list(np.linspace(1, 0, 100)), 50, 1e-8)

    def test_product_target(self):
        res = run_mfvi(isotropic_mixture([1.0], [[0.0, 0.0]]), MfviConfig(**FAST))
        # the training objective is exact under Gauss-Hermite; the held-out estimate carries MC noise
        assert res.kl_trace.min() <= 1e-3
        assert abs(res.kl) <= 1e-3 + 3 * res.kl_se

    def test_correlated_gaussian(self):
        res = run_mfvi(get_preset("fig3a").target, MfviConfig(seed=0, restarts=2))
        expected = mfvi_gaussian_kl([[1.8, 1.2], [1.2, 1.0]])
        assert expected == pytest.approx(0.5 * math.log(5), abs=1e-12)
        assert res.kl == pytest.approx(expected, abs=0.05)

    def test_symmetric_mixture_collapses(self):
        target = get_preset("fig1-m3").target
        res = run_mfvi(target, MfviConfig(seed=1))
        cert = gaussian_product_separation(target)
        masses = quadrant_mass(res.sample(100_000, np.random.default_rng(0)), cert)
        assert min(masses) <= 0.05

    def test_bit_reproducible(self):
        cfg = MfviConfig(seed=5, max_iter=300, quadrature="mc:1024", n_eval=2048, restarts=2)
        a = run_mfvi(get_preset("fig3e").target, cfg)
        b = run_mfvi(get_preset("fig3e").target, cfg)
        assert a.theta.lam.tobytes() == b.theta.lam.tobytes()
        assert a.kl_trace.tobytes() == b.kl_trace.tobytes()
        assert a.kl == b.kl

    def test_gauss_hermite_warns_on_steep_dictionary(self, caplog):
        run_mfvi(quadratic_potential(2), MfviConfig(max_iter=5, quadrature="gh:20", n_eval=1024, restarts=1))
        assert "do not resolve" in caplog.text

    def test_restarts_select_heavier_mode(self):
        # single starts land on either mode; the held-out selection keeps the heavier one
        target = isotropic_mixture([0.4, 0.6], [[-4.0, -4.0], [4.0, 4.0]])
        res = run_mfvi(target, MfviConfig(seed=3, max_iter=3000))
        assert len(res.restart_kls) == 8
        assert res.kl == min(res.restart_kls)
        assert res.sample(1000, np.random.default_rng(0)).mean(axis=0) == pytest.approx([4.0, 4.0], abs=0.2)

    def test_accepts_bare_potential(self):
        res = run_mfvi(quadratic_potential(2), MfviConfig(max_iter=50, **FAST))
        assert res.exact and res.kl_trace.min() <= 1e-3
