"""Transport maps: warp algebra, forward/inverse round trips, densities
against quadrature, and analytic Jacobian products against finite
differences."""

import math

import numpy as np
import pytest
from scipy import integrate, optimize

from blockvi.kernels import FactorScale, LowerTriangular, normal_quantile
from blockvi.maps import (
    M1Params,
    M2Params,
    m1_forward,
    m1_forward_from_z,
    m1_inverse,
    m1_log_density,
    m2_forward,
    m2_forward_from_z,
    m2_inverse,
    m2_log_density,
    map_param_jacobian_apply,
    map_pullback_to_z,
    yj_dlogderiv_deta,
    yj_forward,
    yj_inverse,
    yj_inverse_deriv,
    yj_d2k_dx2_over_dk,
)


class TestYJWarp:
    def test_identity_at_eta_one(self):
        x = np.linspace(-4, 4, 41)
        assert np.allclose(yj_inverse(x, 1.0), x, atol=1e-14)

    def test_zero_fixed_point(self):
        for eta in (0.2, 0.7, 1.0, 1.5, 1.9):
            assert yj_inverse(0.0, eta) == pytest.approx(0.0, abs=1e-15)

    def test_eta2_frozen_value(self):
        # oracle: numerically invert the forward YJ map at eta=2
        root = optimize.brentq(lambda t: (((1 + t) ** 2 - 1) / 2) - 1.0, 0.0, 5.0)
        assert root == pytest.approx(math.sqrt(3) - 1.0, abs=1e-12)
        assert float(yj_inverse(1.0, 2.0)) == pytest.approx(root, abs=1e-12)

    def test_strictly_increasing_and_positive_deriv(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-6, 6, 10_000)
        eta = rng.uniform(0.05, 1.95, 10_000)
        dkdx, _ = yj_inverse_deriv(x, eta)
        assert np.all(dkdx > 0.0)
        xs = np.sort(rng.uniform(-5, 5, 300))
        for e in (0.3, 1.0, 1.7):
            vals = yj_inverse(xs, e)
            assert np.all(np.diff(vals) > 0.0)

    def test_forward_inverts_k(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-5, 5, 200)
        eta = rng.uniform(0.1, 1.9, 200)
        assert np.allclose(yj_forward(yj_inverse(x, eta), eta), x, atol=1e-10)

    def test_deriv_identities_at_eta_one(self):
        dkdx, dkdeta = yj_inverse_deriv(np.array([0.0]), np.array([1.0]))
        assert dkdx[0] == pytest.approx(1.0, abs=1e-14)
        assert dkdeta[0] == pytest.approx(0.0, abs=1e-14)

    def test_derivs_match_finite_differences(self):
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(200):
            x = float(rng.uniform(-4, 4))
            eta = float(rng.uniform(0.1, 1.9))
            dkdx, dkdeta = yj_inverse_deriv(x, eta)
            fd_x = (yj_inverse(x + h, eta) - yj_inverse(x - h, eta)) / (2 * h)
            fd_e = (yj_inverse(x, eta + h) - yj_inverse(x, eta - h)) / (2 * h)
            assert float(dkdx) == pytest.approx(float(fd_x), rel=1e-6, abs=1e-9)
            assert float(dkdeta) == pytest.approx(float(fd_e), rel=1e-6, abs=1e-9)

    def test_log_deriv_derivatives(self):
        rng = np.random.default_rng(3)
        h = 1e-6
        for _ in range(50):
            x = float(rng.uniform(-3, 3))
            eta = float(rng.uniform(0.15, 1.85))
            dkdx = lambda xv, ev: float(yj_inverse_deriv(xv, ev)[0])  # noqa: E731
            fd_ratio = (math.log(dkdx(x + h, eta)) - math.log(dkdx(x - h, eta))) / (2 * h)
            assert float(yj_d2k_dx2_over_dk(x, eta)) == pytest.approx(fd_ratio, rel=1e-5, abs=1e-8)
            fd_eta = (math.log(dkdx(x, eta + h)) - math.log(dkdx(x, eta - h))) / (2 * h)
            assert float(yj_dlogderiv_deta(x, eta)) == pytest.approx(fd_eta, rel=1e-5, abs=1e-8)


def random_m1(rng, d, lpattern="dense", bandwidth=2, warped=True):
    L = None
    if lpattern in ("dense", "banded-L", "banded-Linv"):
        pat = "unit-dense" if lpattern == "dense" else "unit-banded"
        L = LowerTriangular.zeros(d, pattern=pat, bandwidth=bandwidth)
        L.storage[:] = 0.3 * rng.standard_normal(L.storage.size)
    return M1Params(
        b=rng.standard_normal(d),
        s=rng.uniform(0.5, 2.0, d),
        L=L,
        lpattern=lpattern,
        eta=rng.uniform(0.4, 1.6, d) if warped else None,
    )


def random_m2(rng, d, w=2, warped=True):
    scale = FactorScale(d, 0.4 * rng.standard_normal((d, w)), rng.uniform(0.5, 1.5, d))
    return M2Params(
        b=rng.standard_normal(d),
        scale=scale,
        eta=rng.uniform(0.4, 1.6, d) if warped else None,
    )


class TestM1:
    def test_identity_configuration(self):
        d = 4
        params = M1Params(b=np.zeros(d), s=np.ones(d), lpattern="identity", eta=None)
        u = np.array([0.2, 0.5, 0.7, 0.9])
        theta, z, y = m1_forward(params, u)
        assert np.allclose(theta, normal_quantile(u))
        assert np.allclose(z, y)

    def test_median_maps_to_location(self):
        rng = np.random.default_rng(5)
        params = random_m1(rng, 5, "dense")
        theta, _, _ = m1_forward(params, np.full(5, 0.5))
        assert np.allclose(theta, params.b, atol=1e-12)

    def test_matches_kernel_composition(self):
        # oracle: compose quantile, dense mat-vec, warp with plain numpy
        rng = np.random.default_rng(6)
        params = random_m1(rng, 4, "dense")
        u = rng.uniform(0.05, 0.95, 4)
        theta, z, y = m1_forward(params, u)
        z0 = normal_quantile(u)
        y0 = params.L.to_dense() @ z0
        theta0 = params.b + params.s * yj_inverse(y0, params.eta)
        assert np.allclose(theta, theta0, atol=1e-12)

    @pytest.mark.parametrize("lpattern", ["identity", "dense", "banded-L", "banded-Linv"])
    def test_round_trip_all_patterns(self, lpattern):
        rng = np.random.default_rng(7)
        for _ in range(10):
            params = random_m1(rng, 6, lpattern)
            u = rng.uniform(0.01, 0.99, 6)
            theta, z, y = m1_forward(params, u)
            z2, y2 = m1_inverse(params, theta)
            assert np.allclose(z2, z, atol=1e-9)
            assert np.allclose(y2, y, atol=1e-9)

    def test_boundary_u_rejected(self):
        params = M1Params(b=np.zeros(2), s=np.ones(2))
        with pytest.raises(ValueError):
            m1_forward(params, np.array([0.0, 0.5]))

    def test_log_density_gaussian_case(self):
        # identity warp: matches the closed-form multivariate normal
        rng = np.random.default_rng(8)
        for lpattern in ("identity", "dense"):
            params = random_m1(rng, 5, lpattern, warped=False)
            Ld = np.eye(5) if params.L is None else params.L.to_dense()
            cov = np.diag(params.s) @ Ld @ Ld.T @ np.diag(params.s)
            theta = rng.standard_normal(5)
            diff = theta - params.b
            expect = (
                -0.5 * diff @ np.linalg.solve(cov, diff)
                - 0.5 * np.linalg.slogdet(cov)[1]
                - 2.5 * math.log(2 * math.pi)
            )
            assert m1_log_density(params, theta) == pytest.approx(expect, abs=1e-10)

    def test_log_density_univariate_frozen(self):
        params = M1Params(b=np.zeros(1), s=np.array([2.0]))
        expect = -0.5 * math.log(2 * math.pi) - math.log(2.0)
        assert m1_log_density(params, np.zeros(1)) == pytest.approx(expect, abs=1e-14)

    @pytest.mark.parametrize("eta", [0.2, 1.0, 1.8])
    def test_density_integrates_to_one(self, eta):
        params = M1Params(b=np.array([0.4]), s=np.array([1.3]), eta=np.array([eta]))
        val, err = integrate.quad(
            lambda t: math.exp(m1_log_density(params, np.array([t]))),
            -60.0, 60.0, limit=400,
        )
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_density_uses_intermediates(self):
        rng = np.random.default_rng(9)
        params = random_m1(rng, 4, "banded-Linv")
        u = rng.uniform(0.1, 0.9, 4)
        theta, z, y = m1_forward(params, u)
        assert m1_log_density(params, theta, (z, y)) == pytest.approx(
            m1_log_density(params, theta), abs=1e-10
        )


class TestM2:
    def test_trivial_configuration(self):
        d = 3
        scale = FactorScale(d, np.zeros((d, 1)), np.ones(d))
        params = M2Params(b=np.zeros(d), scale=scale, eta=None)
        u = np.array([0.3, 0.6, 0.8])
        theta, z, y = m2_forward(params, u)
        assert np.allclose(theta, normal_quantile(u))

    def test_round_trip(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            params = random_m2(rng, 7, w=2)
            u = rng.uniform(0.01, 0.99, 7)
            theta, z, y = m2_forward(params, u)
            z2, y2 = m2_inverse(params, theta)
            assert np.allclose(z2, z, atol=1e-9)

    def test_log_density_against_dense_oracle(self):
        # w=1 instance vs the plain change-of-variables with dense algebra
        rng = np.random.default_rng(11)
        for _ in range(10):
            d = int(rng.integers(2, 17))
            params = random_m2(rng, d, w=1)
            theta = params.b + 0.5 * rng.standard_normal(d)
            E = params.scale.to_dense()
            y = yj_forward(theta - params.b, params.eta)
            z = np.linalg.solve(E, y)
            from blockvi.maps import yj_log_deriv_x
            expect = (
                np.sum(-0.5 * z * z - 0.5 * math.log(2 * math.pi))
                - np.linalg.slogdet(E)[1]
                - np.sum(yj_log_deriv_x(y, params.eta))
            )
            assert m2_log_density(params, theta) == pytest.approx(expect, abs=1e-9)

    def test_gaussian_case_covariance(self):
        # identity warp: theta = b + E z, so cov = E^2; Monte Carlo check
        rng = np.random.default_rng(12)
        d = 4
        params = random_m2(rng, d, w=1, warped=False)
        E = params.scale.to_dense()
        n = 200_000
        zs = rng.standard_normal((n, d))
        thetas = params.b + zs @ E.T
        cov = np.cov(thetas.T)
        assert np.max(np.abs(cov - E @ E)) < 0.05 * np.max(np.abs(E @ E))


def fd_param_grad(forward, params_vec, cotangent, h=1e-6):
    grad = np.zeros_like(params_vec)
    for i in range(params_vec.size):
        dp = np.zeros_like(params_vec)
        dp[i] = h
        tp = forward(params_vec + dp)
        tm = forward(params_vec - dp)
        grad[i] = (tp - tm) @ cotangent / (2 * h)
    return grad


class TestParamJacobians:
    def test_zero_cotangent(self):
        rng = np.random.default_rng(13)
        params = random_m1(rng, 4, "dense")
        u = rng.uniform(0.1, 0.9, 4)
        _, z, y = m1_forward(params, u)
        grads = map_param_jacobian_apply(params, (z, y), np.zeros(4))
        assert all(np.allclose(g, 0.0) for g in grads.values())

    def test_b_gradient_is_cotangent(self):
        rng = np.random.default_rng(14)
        params = random_m1(rng, 5, "banded-L")
        u = rng.uniform(0.1, 0.9, 5)
        _, z, y = m1_forward(params, u)
        w = rng.standard_normal(5)
        grads = map_param_jacobian_apply(params, (z, y), w)
        assert np.allclose(grads["b"], w)

    @pytest.mark.parametrize("lpattern", ["identity", "dense", "banded-L", "banded-Linv"])
    def test_m1_grads_match_fd(self, lpattern):
        rng = np.random.default_rng(15)
        for _ in range(25):
            d = 5
            params = random_m1(rng, d, lpattern)
            u = rng.uniform(0.05, 0.95, d)
            _, z, y = m1_forward(params, u)
            w = rng.standard_normal(d)
            grads = map_param_jacobian_apply(params, (z, y), w)

            def theta_of(b=None, s=None, Ls=None, eta=None):
                p = M1Params(
                    b=params.b if b is None else b,
                    s=params.s if s is None else s,
                    L=None if params.L is None else LowerTriangular(
                        params.L.dim, params.L.pattern,
                        params.L.storage.copy() if Ls is None else Ls,
                        params.L.bandwidth),
                    lpattern=params.lpattern,
                    eta=params.eta if eta is None else eta,
                )
                return m1_forward_from_z(p, z)[0]

            fd_b = fd_param_grad(lambda v: theta_of(b=v), params.b, w)
            assert np.allclose(grads["b"], fd_b, rtol=1e-6, atol=1e-8)
            fd_s = fd_param_grad(lambda v: theta_of(s=v), params.s, w)
            assert np.allclose(grads["s"], fd_s, rtol=1e-6, atol=1e-8)
            fd_eta = fd_param_grad(lambda v: theta_of(eta=v), params.eta, w)
            assert np.allclose(grads["eta"], fd_eta, rtol=1e-6, atol=1e-7)
            if lpattern != "identity":
                fd_L = fd_param_grad(lambda v: theta_of(Ls=v), params.L.storage, w)
                assert np.allclose(grads["L"], fd_L, rtol=1e-6, atol=1e-7)

    def test_m2_grads_match_fd(self):
        rng = np.random.default_rng(16)
        for _ in range(25):
            d, wrank = 6, 2
            params = random_m2(rng, d, w=wrank)
            u = rng.uniform(0.05, 0.95, d)
            _, z, y = m2_forward(params, u)
            w = rng.standard_normal(d)
            grads = map_param_jacobian_apply(params, (z, y), w)

            def theta_of(b=None, J=None, draw=None, eta=None):
                p = M2Params(
                    b=params.b if b is None else b,
                    scale=FactorScale(
                        d,
                        params.scale.factor if J is None else J.reshape(d, wrank),
                        params.scale.diag_raw if draw is None else draw,
                    ),
                    eta=params.eta if eta is None else eta,
                )
                return m2_forward_from_z(p, z)[0]

            fd_b = fd_param_grad(lambda v: theta_of(b=v), params.b, w)
            assert np.allclose(grads["b"], fd_b, rtol=1e-6, atol=1e-8)
            fd_J = fd_param_grad(lambda v: theta_of(J=v), params.scale.factor.ravel(), w)
            assert np.allclose(grads["J"].ravel(), fd_J, rtol=1e-6, atol=1e-7)
            fd_d = fd_param_grad(lambda v: theta_of(draw=v), params.scale.diag_raw, w)
            assert np.allclose(grads["diag_raw"], fd_d, rtol=1e-6, atol=1e-7)
            fd_eta = fd_param_grad(lambda v: theta_of(eta=v), params.eta, w)
            assert np.allclose(grads["eta"], fd_eta, rtol=1e-6, atol=1e-7)

    @pytest.mark.parametrize("which", ["m1-dense", "m1-banded-Linv", "m2"])
    def test_pullback_to_z_matches_fd(self, which):
        rng = np.random.default_rng(17)
        d = 5
        if which == "m2":
            params = random_m2(rng, d)
            fwd = lambda zz: m2_forward_from_z(params, zz)[0]  # noqa: E731
            inter = m2_forward_from_z
        else:
            params = random_m1(rng, d, which.removeprefix("m1-"))
            fwd = lambda zz: m1_forward_from_z(params, zz)[0]  # noqa: E731
            inter = m1_forward_from_z
        z = rng.standard_normal(d)
        _, y = inter(params, z)
        w = rng.standard_normal(d)
        zbar = map_pullback_to_z(params, (z, y), w)
        fd = fd_param_grad(fwd, z, w)
        assert np.allclose(zbar, fd, rtol=1e-6, atol=1e-8)
