"""Learnable per-block transport maps from the uniform cube to R^d.

Two families are provided.  M1 scales a triangular Gaussian core,

    T(u) = b + s o k_eta(L z),    z = Phi^{-1}(u),

with L unit lower triangular under a declared pattern (identity, dense,
banded on L, or banded on L^{-1}).  M2 replaces the triangular core with a
low-rank-plus-diagonal one, T(u) = b + k_eta(E z) with E = J J^T + D^2.
The elementwise warp k_eta is the inverse Yeo-Johnson transformation with
eta in (0, 2); eta = 1 is the identity and both maps are then multivariate
Gaussian.

Every map exposes a forward pass keeping (z, y) intermediates, the log
density of the induced marginal, and analytic cotangent pullbacks for both
inputs and parameters, so a single backward sweep serves the whole ELBO
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import (
    FactorScale,
    LowerTriangular,
    banded_unit_lower_solve,
    banded_unit_upper_solve,
    normal_cdf,
    normal_logpdf,
    normal_quantile,
)

__all__ = [
    "UNIFORM_CLIP",
    "yj_inverse",
    "yj_forward",
    "yj_inverse_deriv",
    "yj_log_deriv_x",
    "yj_dlogderiv_deta",
    "yj_d2k_dx2_over_dk",
    "M1Params",
    "M2Params",
    "m1_forward",
    "m1_forward_from_z",
    "m1_inverse",
    "m1_log_density",
    "m2_forward",
    "m2_forward_from_z",
    "m2_inverse",
    "m2_log_density",
    "map_param_jacobian_apply",
    "map_pullback_to_z",
]

# uniforms are clipped here before Phi^{-1} to keep upstream copula draws
# off the boundary
UNIFORM_CLIP = 1e-14


# ---------------------------------------------------------------------------
# Inverse Yeo-Johnson warp
# ---------------------------------------------------------------------------

def yj_inverse(x, eta):
    """Inverse Yeo-Johnson warp k_eta(x), increasing in x, identity at eta=1."""
    x = np.asarray(x, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x.shape)
    pos = x >= 0.0
    out = np.empty_like(x)
    e = eta[pos]
    out[pos] = np.power(1.0 + x[pos] * e, 1.0 / e) - 1.0
    g = 2.0 - eta[~pos]
    out[~pos] = 1.0 - np.power(1.0 - x[~pos] * g, 1.0 / g)
    return out


def yj_forward(t, eta):
    """Closed-form inverse of k_eta (the forward Yeo-Johnson transform)."""
    t = np.asarray(t, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), t.shape)
    pos = t >= 0.0
    out = np.empty_like(t)
    e = eta[pos]
    out[pos] = (np.power(1.0 + t[pos], e) - 1.0) / e
    g = 2.0 - eta[~pos]
    out[~pos] = -(np.power(1.0 - t[~pos], g) - 1.0) / g
    return out


def yj_dk_dx(x, eta):
    """dk/dx, strictly positive everywhere."""
    x = np.asarray(x, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x.shape)
    pos = x >= 0.0
    out = np.empty_like(x)
    e = eta[pos]
    out[pos] = np.power(1.0 + x[pos] * e, 1.0 / e - 1.0)
    g = 2.0 - eta[~pos]
    out[~pos] = np.power(1.0 - x[~pos] * g, 1.0 / g - 1.0)
    return out


def yj_dk_deta(x, eta):
    """dk/deta at fixed x."""
    x = np.asarray(x, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x.shape)
    out = np.empty_like(x)
    pos = x >= 0.0
    xp, e = x[pos], eta[pos]
    w = 1.0 + xp * e
    out[pos] = np.power(w, 1.0 / e) * (-np.log(w) / e ** 2 + xp / (e * w))
    xn, g = x[~pos], 2.0 - eta[~pos]
    w = 1.0 - xn * g
    # k = 1 - w^{1/g}; dk/deta = -dk/dg
    out[~pos] = np.power(w, 1.0 / g) * (-np.log(w) / g ** 2 - xn / (g * w))
    return out


def yj_inverse_deriv(x, eta):
    """Both partials (dk/dx, dk/deta) of the inverse Yeo-Johnson warp."""
    return yj_dk_dx(x, eta), yj_dk_deta(x, eta)


def yj_log_deriv_x(x, eta):
    """log dk/dx, used by the change-of-variables density."""
    x = np.asarray(x, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x.shape)
    pos = x >= 0.0
    out = np.empty_like(x)
    e = eta[pos]
    out[pos] = (1.0 / e - 1.0) * np.log1p(x[pos] * e)
    g = 2.0 - eta[~pos]
    out[~pos] = (1.0 / g - 1.0) * np.log1p(-x[~pos] * g)
    return out


def yj_d2k_dx2_over_dk(x, eta):
    """k''(x)/k'(x) = d log k'/dx; equals (1-eta)/(1+x*eta) on x >= 0."""
    x = np.asarray(x, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x.shape)
    pos = x >= 0.0
    out = np.empty_like(x)
    out[pos] = (1.0 - eta[pos]) / (1.0 + x[pos] * eta[pos])
    g = 2.0 - eta[~pos]
    out[~pos] = (1.0 - eta[~pos]) / (1.0 - x[~pos] * g)
    return out


def yj_dlogderiv_deta(x, eta):
    """d log k'(x) / deta at fixed x."""
    x = np.asarray(x, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x.shape)
    pos = x >= 0.0
    out = np.empty_like(x)
    xp, e = x[pos], eta[pos]
    w = 1.0 + xp * e
    out[pos] = -np.log(w) / e ** 2 + (1.0 / e - 1.0) * xp / w
    xn, g = x[~pos], 2.0 - eta[~pos]
    w = 1.0 - xn * g
    out[~pos] = np.log(w) / g ** 2 + (1.0 / g - 1.0) * xn / w
    return out


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------

@dataclass
class M1Params:
    """Location b, positive scales s, unit-triangular L, optional warp eta.

    ``lpattern`` is one of identity / dense / banded-L / banded-Linv.  For
    banded-Linv the stored factor is L^{-1} and the forward pass solves it.
    eta=None means the identity warp.
    """

    b: np.ndarray
    s: np.ndarray
    L: LowerTriangular | None = None
    lpattern: str = "identity"
    eta: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        if np.any(self.s <= 0.0):
            raise ValueError("M1 scales must be positive")
        if self.lpattern not in ("identity", "dense", "banded-L", "banded-Linv"):
            raise ValueError(f"unknown L pattern {self.lpattern!r}")
        if self.lpattern != "identity" and self.L is None:
            raise ValueError("pattern requires an explicit factor")
        if self.eta is not None:
            self.eta = np.asarray(self.eta, dtype=float)
            if np.any(self.eta <= 0.0) or np.any(self.eta >= 2.0):
                raise ValueError("warp parameters must lie in (0, 2)")

    @property
    def dim(self) -> int:
        return self.b.size

    def apply_core(self, z: np.ndarray) -> np.ndarray:
        """y = L z under the declared pattern."""
        if self.lpattern == "identity":
            return np.asarray(z, dtype=float).copy()
        if self.lpattern == "banded-Linv":
            return banded_unit_lower_solve(self.L, z)
        return self.L.matvec(z)

    def invert_core(self, y: np.ndarray) -> np.ndarray:
        """z = L^{-1} y under the declared pattern."""
        if self.lpattern == "identity":
            return np.asarray(y, dtype=float).copy()
        if self.lpattern == "banded-Linv":
            return self.L.matvec(y)
        return self.L.solve(y)

    def core_rmatvec(self, v: np.ndarray) -> np.ndarray:
        """L^T v, the pullback of a cotangent on y to z."""
        if self.lpattern == "identity":
            return np.asarray(v, dtype=float).copy()
        if self.lpattern == "banded-Linv":
            return banded_unit_upper_solve(self.L, v)
        return self.L.rmatvec(v)


@dataclass
class M2Params:
    """Location b, low-rank-plus-diagonal scale E = J J^T + D^2, optional warp."""

    b: np.ndarray
    scale: FactorScale
    eta: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.eta is not None:
            self.eta = np.asarray(self.eta, dtype=float)
            if np.any(self.eta <= 0.0) or np.any(self.eta >= 2.0):
                raise ValueError("warp parameters must lie in (0, 2)")

    @property
    def dim(self) -> int:
        return self.b.size


def _warp(params, y):
    if params.eta is None:
        return y.copy()
    return yj_inverse(y, params.eta)


def _warp_deriv(params, y):
    if params.eta is None:
        return np.ones_like(y)
    return yj_dk_dx(y, params.eta)


def _warp_logderiv(params, y):
    if params.eta is None:
        return np.zeros_like(y)
    return yj_log_deriv_x(y, params.eta)


def _unwarp(params, t):
    if params.eta is None:
        return t.copy()
    return yj_forward(t, params.eta)


# ---------------------------------------------------------------------------
# M1
# ---------------------------------------------------------------------------

def m1_forward_from_z(params: M1Params, z: np.ndarray):
    """theta = b + s o k(L z) from an already-Gaussian input."""
    y = params.apply_core(z)
    theta = params.b + params.s * _warp(params, y)
    return theta, y


def m1_forward(params: M1Params, u: np.ndarray):
    """Map uniforms to theta; returns (theta, z, y) for gradient reuse."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("m1_forward requires u strictly inside (0, 1)")
    z = normal_quantile(np.clip(u, UNIFORM_CLIP, 1.0 - UNIFORM_CLIP))
    theta, y = m1_forward_from_z(params, z)
    return theta, z, y


def m1_inverse(params: M1Params, theta: np.ndarray):
    """Recover (z, y) with the closed-form warp inverse and triangular solve."""
    t = (np.asarray(theta, dtype=float) - params.b) / params.s
    y = _unwarp(params, t)
    z = params.invert_core(y)
    return z, y


def m1_log_density(params: M1Params, theta: np.ndarray, intermediates=None) -> float:
    """Log density of the induced marginal at theta.

    With the identity warp this is the N(b, S L L^T S) log density.
    """
    if intermediates is None:
        z, y = m1_inverse(params, theta)
    else:
        z, y = intermediates
    return float(
        np.sum(normal_logpdf(z)) - np.sum(np.log(params.s))
        - np.sum(_warp_logderiv(params, y))
    )


# ---------------------------------------------------------------------------
# M2
# ---------------------------------------------------------------------------

def m2_forward_from_z(params: M2Params, z: np.ndarray):
    y = params.scale.matvec(np.asarray(z, dtype=float))
    theta = params.b + _warp(params, y)
    return theta, y


def m2_forward(params: M2Params, u: np.ndarray):
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("m2_forward requires u strictly inside (0, 1)")
    z = normal_quantile(np.clip(u, UNIFORM_CLIP, 1.0 - UNIFORM_CLIP))
    theta, y = m2_forward_from_z(params, z)
    return theta, z, y


def m2_inverse(params: M2Params, theta: np.ndarray):
    y = _unwarp(params, np.asarray(theta, dtype=float) - params.b)
    z = params.scale.solve(y)
    return z, y


def m2_log_density(params: M2Params, theta: np.ndarray, intermediates=None) -> float:
    """Log density via log|det E| (determinant lemma) and a Woodbury solve."""
    if intermediates is None:
        z, y = m2_inverse(params, theta)
    else:
        z, y = intermediates
    return float(
        np.sum(normal_logpdf(z)) - params.scale.logdet()
        - np.sum(_warp_logderiv(params, y))
    )


# ---------------------------------------------------------------------------
# Cotangent pullbacks
# ---------------------------------------------------------------------------

def map_param_jacobian_apply(params, intermediates, cotangent: np.ndarray) -> dict:
    """[d theta / d params]^T @ cotangent, assembled analytically.

    ``intermediates`` is the (z, y) pair from a matching forward call.
    Returns a dict keyed by parameter name (b, s, L, eta for M1; b, J,
    diag_raw, eta for M2).  Hadamard products cover b, s, eta and the
    diagonal; L and J need one outer-product accumulation each.
    """
    z, y = intermediates
    w = np.asarray(cotangent, dtype=float)
    if isinstance(params, M1Params):
        kprime = _warp_deriv(params, y)
        ky = _warp(params, y)
        grads = {"b": w.copy(), "s": w * ky}
        if params.eta is not None:
            grads["eta"] = w * params.s * yj_dk_deta(y, params.eta)
        if params.lpattern != "identity":
            v = w * params.s * kprime  # cotangent on y
            if params.lpattern == "banded-Linv":
                # y = Linv^{-1} z: grad wrt Linv entries is -(Linv^{-T} v) y^T
                left = banded_unit_upper_solve(params.L, v)
                grads["L"] = _outer_on_pattern(params.L, -left, y)
            else:
                grads["L"] = _outer_on_pattern(params.L, v, z)
        return grads
    if isinstance(params, M2Params):
        kprime = _warp_deriv(params, y)
        v = w * kprime
        J = params.scale.factor
        grads = {
            "b": w.copy(),
            "J": np.outer(v, J.T @ z) + np.outer(z, J.T @ v),
            "diag_raw": 2.0 * params.scale.diag_raw * z * v,
        }
        if params.eta is not None:
            grads["eta"] = w * yj_dk_deta(y, params.eta)
        return grads
    raise TypeError(f"unsupported map parameter record {type(params)!r}")


def _outer_on_pattern(L: LowerTriangular, a: np.ndarray, bvec: np.ndarray) -> np.ndarray:
    """outer(a, bvec) restricted to the stored entries of L, packed order."""
    out = np.empty_like(L.storage)
    for j in range(L.dim):
        r0, r1 = L._col_rows(j)
        out[L._offsets[j]:L._offsets[j + 1]] = a[r0:r1] * bvec[j]
    return out


def map_pullback_to_z(params, intermediates, cotangent: np.ndarray) -> np.ndarray:
    """[d theta / d z]^T @ cotangent for either map family."""
    z, y = intermediates
    w = np.asarray(cotangent, dtype=float)
    if isinstance(params, M1Params):
        v = w * params.s * _warp_deriv(params, y)
        return params.core_rmatvec(v)
    if isinstance(params, M2Params):
        v = w * _warp_deriv(params, y)
        return params.scale.matvec(v)  # E is symmetric
    raise TypeError(f"unsupported map parameter record {type(params)!r}")
