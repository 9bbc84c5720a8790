"""Target posteriors: log h(theta) = log p(y|theta) + log p(theta) and its
gradient, plus dataset simulation and file ingestion.

Two targets are provided.  ``LogisticHorseshoeTarget`` is sparse logistic
regression under a global-local shrinkage prior in its non-centered
parameterization beta_i = alpha_i * exp(dtilde_i) * exp(xtilde): standard
normal priors on alpha, half-Cauchy priors on the local and global scales
expressed on the log scale with their Jacobians.  ``GaussianTarget`` is an
unnormalized multivariate normal with a recorded offset, so its evidence
is known exactly and the ELBO machinery can be anchored against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .copulas import BlockPartition
from .kernels import LowerTriangular

__all__ = [
    "LogisticHorseshoeTarget",
    "GaussianTarget",
    "logistic_horseshoe_logh",
    "logistic_horseshoe_grad",
    "gaussian_target_logh",
    "gaussian_target_grad",
    "simulate_logistic_dataset",
    "read_csv_dataset",
    "write_csv_dataset",
    "read_libsvm_dataset",
    "write_libsvm_dataset",
    "dataset_matrix",
]

LOG_2_OVER_PI = math.log(2.0 / math.pi)


def dataset_matrix(X: np.ndarray, sparse_threshold: float = 0.5):
    """Return X as-is or as CSR when more than ``sparse_threshold`` zeros."""
    X = np.asarray(X, dtype=float)
    density = np.count_nonzero(X) / X.size
    if 1.0 - density > sparse_threshold:
        return sparse.csr_matrix(X)
    return X


@dataclass
class LogisticHorseshoeTarget:
    """Bernoulli-logit likelihood with non-centered horseshoe shrinkage.

    theta = (alpha[m], dtilde[m], xtilde[1]), d = 2m + 1; the induced
    coefficients are beta = alpha * exp(dtilde) * exp(xtilde).
    """

    X: object  # (n, m) dense ndarray or scipy CSR
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if not set(np.unique(self.y)).issubset({0.0, 1.0}):
            raise ValueError("labels must be binary 0/1")
        if not sparse.issparse(self.X):
            self.X = np.asarray(self.X, dtype=float)
        if self.X.shape[0] != self.y.size:
            raise ValueError("row count of X must match y")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def dim(self) -> int:
        return 2 * self.m + 1

    def partition(self) -> BlockPartition:
        return BlockPartition((self.m, self.m, 1))

    def split(self, theta):
        m = self.m
        return theta[:m], theta[m:2 * m], float(theta[2 * m])

    def beta(self, theta):
        alpha, dt, xt = self.split(theta)
        return alpha * np.exp(dt + xt)

    def logh(self, theta) -> float:
        alpha, dt, xt = self.split(theta)
        beta = alpha * np.exp(dt + xt)
        eta = self.X @ beta
        loglik = float(self.y @ eta - np.sum(np.logaddexp(0.0, eta)))
        lp_alpha = float(-0.5 * alpha @ alpha - alpha.size * 0.5 * math.log(2 * math.pi))
        # half-Cauchy on exp(dt), exp(xt) with log-scale Jacobian
        lp_dt = float(np.sum(LOG_2_OVER_PI + dt - np.logaddexp(0.0, 2.0 * dt)))
        lp_xt = LOG_2_OVER_PI + xt - float(np.logaddexp(0.0, 2.0 * xt))
        return loglik + lp_alpha + lp_dt + lp_xt

    def grad(self, theta) -> np.ndarray:
        alpha, dt, xt = self.split(theta)
        scale = np.exp(dt + xt)
        beta = alpha * scale
        eta = self.X @ beta
        resid = self.y - 1.0 / (1.0 + np.exp(-eta))
        xtr = self.X.T @ resid
        if sparse.issparse(self.X):
            xtr = np.asarray(xtr).ravel()
        g_alpha = scale * xtr - alpha
        g_dt = beta * xtr + 1.0 - 2.0 / (1.0 + np.exp(-2.0 * dt))
        g_xt = float(beta @ xtr) + 1.0 - 2.0 / (1.0 + math.exp(-2.0 * xt))
        return np.concatenate([g_alpha, g_dt, [g_xt]])


@dataclass
class GaussianTarget:
    """Unnormalized Gaussian log h = offset - (theta-mean)' P (theta-mean)/2.

    P is given by its Cholesky factor, so the exact evidence
    log Z = offset + d/2 log(2 pi) - log det chol(P) is always available.
    """

    mean: np.ndarray
    prec_chol: LowerTriangular
    offset: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.prec_chol.dim != self.mean.size:
            raise ValueError("precision factor dimension mismatch")
        self._Ldense = self.prec_chol.to_dense()

    @classmethod
    def from_cov(cls, mean, cov, offset: float = 0.0) -> "GaussianTarget":
        prec = np.linalg.inv(np.asarray(cov, dtype=float))
        prec = 0.5 * (prec + prec.T)
        return cls(np.asarray(mean, dtype=float),
                   LowerTriangular.from_dense(np.linalg.cholesky(prec)), offset)

    @property
    def dim(self) -> int:
        return self.mean.size

    def cov(self) -> np.ndarray:
        P = self._Ldense @ self._Ldense.T
        return np.linalg.inv(P)

    def logh(self, theta) -> float:
        diff = np.asarray(theta, dtype=float) - self.mean
        half = self._Ldense.T @ diff
        return self.offset - 0.5 * float(half @ half)

    def grad(self, theta) -> np.ndarray:
        diff = np.asarray(theta, dtype=float) - self.mean
        return -self._Ldense @ (self._Ldense.T @ diff)

    def log_evidence(self) -> float:
        return (
            self.offset + 0.5 * self.dim * math.log(2 * math.pi)
            - self.prec_chol.logdet()
        )


def logistic_horseshoe_logh(target: LogisticHorseshoeTarget, theta) -> float:
    return target.logh(theta)


def logistic_horseshoe_grad(target: LogisticHorseshoeTarget, theta) -> np.ndarray:
    return target.grad(theta)


def gaussian_target_logh(target: GaussianTarget, theta) -> float:
    return target.logh(theta)


def gaussian_target_grad(target: GaussianTarget, theta) -> np.ndarray:
    return target.grad(theta)


def simulate_logistic_dataset(n: int, m: int, sparsity: float, seed: int):
    """Simulate (X, y, beta_true): standardized Gaussian design, a
    ``sparsity`` fraction of coefficients drawn +-Uniform(1, 2), Bernoulli
    labels through the logistic link.  Fully reproducible from the seed.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    beta = np.zeros(m)
    k = int(round(sparsity * m))
    if k > 0:
        idx = rng.choice(m, size=k, replace=False)
        beta[idx] = rng.uniform(1.0, 2.0, size=k) * rng.choice([-1.0, 1.0], size=k)
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    y = (rng.uniform(size=n) < p).astype(float)
    return X, y, beta


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def read_csv_dataset(path):
    """CSV with a header row, numeric features, final column a binary label."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise ValueError(f"{path}: empty dataset (need header plus rows)")
    header = lines[0].split(",")
    ncol = len(header)
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != ncol:
            raise ValueError(f"{path}:{lineno}: expected {ncol} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from exc
    data = np.asarray(rows)
    X, y = data[:, :-1], data[:, -1]
    if not set(np.unique(y)).issubset({0.0, 1.0}):
        raise ValueError(f"{path}: final column must be a binary 0/1 label")
    return X, y, header[:-1]


def write_csv_dataset(path, X, y, feature_names=None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = feature_names or [f"x{i}" for i in range(X.shape[1])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(list(names) + ["label"]) + "\n")
        for row, label in zip(X, y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def read_libsvm_dataset(path, n_features: int | None = None):
    """Sparse 'label idx:val' text rows with 1-based feature indices."""
    rows, cols, vals, labels = [], [], [], []
    max_col = 0
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty dataset")
    for lineno, ln in enumerate(lines, start=1):
        parts = ln.split()
        try:
            label = float(parts[0])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad label field") from exc
        if label not in (0.0, 1.0):
            raise ValueError(f"{path}:{lineno}: label must be 0 or 1")
        labels.append(label)
        for tok in parts[1:]:
            try:
                idx_s, val_s = tok.split(":")
                idx, val = int(idx_s), float(val_s)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad feature token {tok!r}") from exc
            if idx < 1:
                raise ValueError(f"{path}:{lineno}: indices are 1-based")
            rows.append(len(labels) - 1)
            cols.append(idx - 1)
            vals.append(val)
            max_col = max(max_col, idx)
    m = n_features if n_features is not None else max_col
    if max_col > m:
        raise ValueError(f"{path}: feature index {max_col} out of range {m}")
    X = sparse.csr_matrix((vals, (rows, cols)), shape=(len(labels), m))
    return X, np.asarray(labels)


def write_libsvm_dataset(path, X, y):
    Xc = sparse.csr_matrix(X)
    y = np.asarray(y)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(Xc.shape[0]):
            start, end = Xc.indptr[i], Xc.indptr[i + 1]
            feats = " ".join(
                f"{j + 1}:{float(Xc.data[k])!r}"
                for k, j in zip(range(start, end), Xc.indices[start:end])
            )
            fh.write(f"{int(y[i])} {feats}".rstrip() + "\n")
