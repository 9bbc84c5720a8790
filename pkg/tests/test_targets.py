"""Targets: values against naive-path oracles, gradients against finite
differences, dataset round trips."""

import math

import numpy as np
import pytest
from scipy import sparse

from blockvi.kernels import LowerTriangular
from blockvi.targets import (
    GaussianTarget,
    LogisticHorseshoeTarget,
    dataset_matrix,
    gaussian_target_grad,
    gaussian_target_logh,
    logistic_horseshoe_grad,
    logistic_horseshoe_logh,
    read_csv_dataset,
    read_libsvm_dataset,
    simulate_logistic_dataset,
    write_csv_dataset,
    write_libsvm_dataset,
)


def fd_grad(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2 * h)
    return g


def naive_logh(X, y, theta):
    # slow direct evaluation: explicit beta, then Bernoulli log-pmf per row
    m = X.shape[1]
    alpha, dt, xt = theta[:m], theta[m:2 * m], theta[2 * m]
    beta = np.array([alpha[i] * math.exp(dt[i]) * math.exp(xt) for i in range(m)])
    total = 0.0
    for i in range(X.shape[0]):
        eta = float(X[i] @ beta)
        p = 1.0 / (1.0 + math.exp(-eta))
        p = min(max(p, 1e-300), 1 - 1e-16)
        total += math.log(p) if y[i] == 1 else math.log(1.0 - p)
    for a in alpha:
        total += -0.5 * a * a - 0.5 * math.log(2 * math.pi)
    for t in list(dt) + [xt]:
        total += math.log(2 / math.pi) + t - math.log(1.0 + math.exp(2.0 * t))
    return total


class TestLogisticHorseshoe:
    def test_priors_only_at_zero(self):
        # m standard-normal terms for alpha plus (m + 1) log-scale
        # half-Cauchy terms for the local and global scales
        m = 4
        target = LogisticHorseshoeTarget(np.zeros((0, m)), np.zeros(0))
        expect = m * (-0.5 * math.log(2 * math.pi)) + (m + 1) * (
            math.log(2 / math.pi) - math.log(2.0)
        )
        assert target.logh(np.zeros(2 * m + 1)) == pytest.approx(expect, abs=1e-12)

    def test_single_zero_row_likelihood(self):
        m = 3
        target = LogisticHorseshoeTarget(np.zeros((1, m)), np.ones(1))
        rng = np.random.default_rng(0)
        t1, t2 = rng.standard_normal(2 * m + 1), rng.standard_normal(2 * m + 1)
        base = LogisticHorseshoeTarget(np.zeros((0, m)), np.zeros(0))
        assert target.logh(t1) - base.logh(t1) == pytest.approx(-math.log(2), abs=1e-12)
        assert target.logh(t2) - base.logh(t2) == pytest.approx(-math.log(2), abs=1e-12)

    def test_against_naive_oracle(self):
        # the naive oracle computes log(1-p) directly, which cancels when a
        # logit is extreme; it certifies structure only to ~1e-8 relative
        rng = np.random.default_rng(1)
        X, y, _ = simulate_logistic_dataset(20, 5, 0.4, seed=3)
        target = LogisticHorseshoeTarget(X, y)
        for _ in range(5):
            theta = rng.standard_normal(11)
            assert target.logh(theta) == pytest.approx(naive_logh(X, y, theta), rel=1e-7)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(2)
        X, y, _ = simulate_logistic_dataset(20, 5, 0.4, seed=4)
        target = LogisticHorseshoeTarget(X, y)
        for _ in range(10):
            theta = rng.standard_normal(11)
            g = logistic_horseshoe_grad(target, theta)
            fd = fd_grad(target.logh, theta)
            assert np.allclose(g, fd, rtol=1e-6, atol=1e-6)

    def test_grad_matches_fd_sparse_matrix(self):
        rng = np.random.default_rng(3)
        X, y, _ = simulate_logistic_dataset(30, 6, 0.3, seed=5)
        X[np.abs(X) < 0.8] = 0.0
        target = LogisticHorseshoeTarget(sparse.csr_matrix(X), y)
        theta = rng.standard_normal(13)
        assert np.allclose(target.grad(theta), fd_grad(target.logh, theta),
                           rtol=1e-6, atol=1e-6)

    def test_grad_zero_at_univariate_stationary_point(self):
        # no data, alpha block: prior is standard normal, stationary at 0
        m = 2
        target = LogisticHorseshoeTarget(np.zeros((0, m)), np.zeros(0))
        theta = np.zeros(2 * m + 1)
        g = target.grad(theta)
        assert np.allclose(g[:m], 0.0, atol=1e-12)

    def test_stability_at_extreme_theta(self):
        X, y, _ = simulate_logistic_dataset(10, 3, 0.5, seed=6)
        target = LogisticHorseshoeTarget(X, y)
        for sign in (+1, -1):
            theta = sign * 30.0 * np.ones(7)
            assert np.isfinite(target.logh(theta))
            assert np.all(np.isfinite(target.grad(theta)))

    def test_label_validation(self):
        with pytest.raises(ValueError):
            LogisticHorseshoeTarget(np.ones((2, 2)), np.array([0.0, 2.0]))


class TestGaussianTarget:
    def make(self, rng, d=6):
        A = rng.standard_normal((d, d))
        cov = A @ A.T / d + np.eye(d)
        return GaussianTarget.from_cov(rng.standard_normal(d), cov, offset=1.3)

    def test_gradient_zero_at_mean(self):
        target = self.make(np.random.default_rng(7))
        assert np.allclose(gaussian_target_grad(target, target.mean), 0.0, atol=1e-12)

    def test_offset_at_mean_identity_precision(self):
        d = 3
        target = GaussianTarget(np.zeros(d), LowerTriangular.from_dense(np.eye(d)), offset=2.5)
        assert gaussian_target_logh(target, np.zeros(d)) == 2.5

    def test_against_dense_quadratic_form(self):
        rng = np.random.default_rng(8)
        target = self.make(rng)
        P = np.linalg.inv(target.cov())
        for _ in range(5):
            theta = rng.standard_normal(6)
            diff = theta - target.mean
            expect = target.offset - 0.5 * diff @ P @ diff
            assert target.logh(theta) == pytest.approx(expect, abs=1e-9)
            assert np.allclose(target.grad(theta), -P @ diff, atol=1e-9)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(9)
        target = self.make(rng)
        theta = rng.standard_normal(6)
        assert np.allclose(target.grad(theta), fd_grad(target.logh, theta),
                           rtol=1e-6, atol=1e-6)

    def test_log_evidence_against_quadrature(self):
        # d=1: integrate exp(logh) directly
        from scipy import integrate
        target = GaussianTarget(np.array([0.7]),
                                LowerTriangular.from_dense(np.array([[2.0]])), offset=0.4)
        val, _ = integrate.quad(lambda t: math.exp(target.logh(np.array([t]))), -30, 30)
        assert math.log(val) == pytest.approx(target.log_evidence(), abs=1e-10)


class TestSimulatedData:
    def test_determinism(self):
        a = simulate_logistic_dataset(50, 10, 0.3, seed=11)
        b = simulate_logistic_dataset(50, 10, 0.3, seed=11)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_sparsity_zero_balanced(self):
        X, y, beta = simulate_logistic_dataset(4000, 5, 0.0, seed=12)
        assert np.all(beta == 0.0)
        assert abs(y.mean() - 0.5) < 3 * 0.5 / math.sqrt(4000)

    def test_class_balance_near_logistic_mean(self):
        X, y, beta = simulate_logistic_dataset(4000, 8, 0.5, seed=13)
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        se = math.sqrt(np.mean(p * (1 - p)) / 4000)
        assert abs(y.mean() - p.mean()) < 4 * se

    def test_columns_standardized(self):
        X, _, _ = simulate_logistic_dataset(200, 6, 0.5, seed=14)
        assert np.allclose(X.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(X.std(axis=0), 1.0, atol=1e-12)


class TestDatasetIO:
    def test_csv_exact_small(self, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text("a,b,label\n1.5,-2.0,1\n0.0,3.25,0\n")
        X, y, names = read_csv_dataset(path)
        assert np.array_equal(X, np.array([[1.5, -2.0], [0.0, 3.25]]))
        assert np.array_equal(y, np.array([1.0, 0.0]))
        assert names == ["a", "b"]

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((7, 3))
        y = rng.integers(0, 2, 7).astype(float)
        path = tmp_path / "rt.csv"
        write_csv_dataset(path, X, y)
        X2, y2, _ = read_csv_dataset(path)
        assert np.array_equal(X, X2)
        assert np.array_equal(y, y2)

    def test_csv_errors(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        with pytest.raises(ValueError):
            read_csv_dataset(empty)
        ragged = tmp_path / "ragged.csv"
        ragged.write_text("a,b,label\n1,2,1\n3,4\n")
        with pytest.raises(ValueError, match="3"):
            read_csv_dataset(ragged)
        nonbinary = tmp_path / "nb.csv"
        nonbinary.write_text("a,label\n1,2\n")
        with pytest.raises(ValueError):
            read_csv_dataset(nonbinary)

    def test_libsvm_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        X = rng.standard_normal((6, 5))
        X[np.abs(X) < 0.9] = 0.0
        y = rng.integers(0, 2, 6).astype(float)
        path = tmp_path / "rt.libsvm"
        write_libsvm_dataset(path, X, y)
        X2, y2 = read_libsvm_dataset(path, n_features=5)
        assert np.array_equal(np.asarray(X2.todense()), X)
        assert np.array_equal(y, y2)

    def test_libsvm_errors(self, tmp_path):
        bad = tmp_path / "bad.libsvm"
        bad.write_text("1 0:3.0\n")
        with pytest.raises(ValueError, match="1-based"):
            read_libsvm_dataset(bad)
        empty = tmp_path / "e.libsvm"
        empty.write_text("\n")
        with pytest.raises(ValueError):
            read_libsvm_dataset(empty)

    def test_sparse_auto_engage(self):
        X = np.zeros((10, 10))
        X[0, 0] = 1.0
        assert sparse.issparse(dataset_matrix(X))
        assert not sparse.issparse(dataset_matrix(np.ones((4, 4))))
