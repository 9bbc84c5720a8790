"""Deterministic scalar and matrix primitives shared by the higher layers.

Gaussian CDF/quantile, Erlang CDF/quantile, the Kendall distribution
function of the independence copula, low-rank-plus-scaled-identity solves,
rank-1 Cholesky updates, and banded triangular solves.  All functions are
pure and accept scalars or numpy arrays where that makes sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

__all__ = [
    "normal_cdf",
    "normal_quantile",
    "normal_logpdf",
    "erlang_cdf",
    "erlang_pdf",
    "erlang_quantile",
    "kendall_cdf",
    "woodbury_inverse_apply",
    "lowrank_diag_solve",
    "lowrank_diag_logdet",
    "cholesky_rank1_updates",
    "cholesky_rank1_updates_jvp",
    "banded_unit_lower_solve",
    "banded_unit_upper_solve",
    "LowerTriangular",
    "FactorScale",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Gaussian CDF / quantile
# ---------------------------------------------------------------------------

def normal_cdf(x):
    """Standard normal CDF, accurate to ~1e-15 absolute."""
    return _sp.ndtr(x)


def normal_quantile(p):
    """Standard normal quantile for p strictly inside (0, 1).

    Raises ValueError if any p lies on or outside the boundary.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("normal_quantile requires p strictly inside (0, 1)")
    return _sp.ndtri(p)


def normal_logpdf(x):
    """Elementwise log density of the standard normal."""
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - _LOG_SQRT_2PI


# ---------------------------------------------------------------------------
# Erlang distribution (scale 1, integer shape)
# ---------------------------------------------------------------------------

def erlang_cdf(r, shape: int):
    """CDF of the Erlang distribution with scale 1 and integer shape.

    F(r) = 1 - sum_{b=0}^{shape-1} r^b e^{-r} / b!, evaluated with a
    running-term recurrence so no factorial is ever formed.  Inputs with
    r > 700 are evaluated in log space to dodge exp underflow.
    """
    if shape < 1:
        raise ValueError("shape must be a positive integer")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0.0):
        raise ValueError("erlang_cdf requires r >= 0")
    scalar = r_arr.ndim == 0
    r_arr = np.atleast_1d(r_arr)
    out = np.empty_like(r_arr)

    small = r_arr <= 700.0
    if np.any(small):
        rs = r_arr[small]
        term = np.exp(-rs)
        total = term.copy()
        for b in range(1, shape):
            term = term * rs / b
            total += term
        out[small] = 1.0 - total
    if np.any(~small):
        # log-space: logsumexp of b*log r - r - log b!
        rl = r_arr[~small]
        bs = np.arange(shape, dtype=float)
        logterms = (bs[None, :] * np.log(rl[:, None])
                    - rl[:, None] - _sp.gammaln(bs + 1.0)[None, :])
        out[~small] = 1.0 - np.exp(_sp.logsumexp(logterms, axis=1))
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def erlang_pdf(r, shape: int):
    """Density r^{shape-1} e^{-r} / (shape-1)! of the Erlang with scale 1."""
    r_arr = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        logpdf = np.where(
            r_arr > 0.0,
            (shape - 1) * np.log(np.maximum(r_arr, 1e-300)) - r_arr
            - _sp.gammaln(shape),
            -np.inf if shape > 1 else 0.0,
        )
    if shape == 1:
        logpdf = -r_arr
    return np.exp(logpdf)


def erlang_quantile(p, shape: int):
    """Inverse Erlang CDF via bracketing plus safeguarded Newton.

    Accepts scalars or arrays of probabilities in [0, 1); absolute
    tolerance 1e-12 on the CDF residual.  The quantile sits inside the
    KVC generative path, so stability of its implicit derivative
    (1 / pdf at the root) matters more than raw speed.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr < 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("erlang_quantile requires p in [0, 1)")
    scalar = p_arr.ndim == 0
    p_arr = np.atleast_1d(p_arr).astype(float)

    lo = np.zeros_like(p_arr)
    hi = np.full_like(p_arr, shape + 10.0 * math.sqrt(shape) + 40.0)
    # widen the bracket for the (clipped) extreme right tail
    bad = erlang_cdf(hi, shape) < p_arr
    while np.any(bad):
        hi[bad] *= 2.0
        bad = erlang_cdf(hi, shape) < p_arr

    # start at a crude interior point; Newton with bisection safeguard
    x = np.where(p_arr > 0.0, shape * np.ones_like(p_arr), 0.0)
    x = np.clip(x, lo + 1e-12, hi)
    for _ in range(200):
        f = erlang_cdf(x, shape) - p_arr
        lo = np.where(f < 0.0, x, lo)
        hi = np.where(f > 0.0, x, hi)
        d = erlang_pdf(x, shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(d > 0.0, f / np.maximum(d, 1e-300), 0.0)
        x_new = x - step
        outside = (x_new <= lo) | (x_new >= hi) | ~np.isfinite(x_new) | (d <= 0.0)
        x_new = np.where(outside, 0.5 * (lo + hi), x_new)
        if np.all(np.abs(f) <= 1e-12) and np.all(np.abs(x_new - x) <= 1e-12 * (1.0 + x)):
            x = x_new
            break
        x = x_new
    x = np.where(p_arr == 0.0, 0.0, x)
    return float(x[0]) if scalar else x


# ---------------------------------------------------------------------------
# Kendall distribution function of the independence copula
# ---------------------------------------------------------------------------

def kendall_cdf(t, shape: int):
    """K(t) = t * sum_{b=0}^{shape-1} (-ln t)^b / b! for t in (0, 1].

    Evaluated as t times a Horner-style nested product in x = -ln t,
    which is the partial exponential series: terms beyond relative
    magnitude ~1e-18 contribute nothing in double precision.
    """
    if shape < 1:
        raise ValueError("shape must be a positive integer")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
        raise ValueError("kendall_cdf requires t in (0, 1]")
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    x = -np.log(t_arr)
    # nested form of sum_{b<=n} x^b/b!:  1 + x/1 (1 + x/2 (1 + ... x/n))
    acc = np.ones_like(x)
    for b in range(shape - 1, 0, -1):
        acc = 1.0 + acc * x / b
    out = t_arr * acc
    out = np.minimum(out, 1.0)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Low-rank plus diagonal linear algebra
# ---------------------------------------------------------------------------

def woodbury_inverse_apply(zeta: float, B: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Solve (zeta*I + B B^T) y = x touching only p-by-p factorizations.

    Cost O(d p^2 + p^3); the d-by-d inverse is never formed.
    """
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    B = np.asarray(B, dtype=float)
    x = np.asarray(x, dtype=float)
    if B.size == 0 or B.shape[1] == 0:
        return x / zeta
    # (zeta I + B B^T)^{-1} = (1/zeta)[I - B (zeta I_p + B^T B)^{-1} B^T]
    p = B.shape[1]
    inner = zeta * np.eye(p) + B.T @ B
    try:
        c = np.linalg.cholesky(inner)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - SPD by construction
        raise np.linalg.LinAlgError("inner p-by-p system is singular") from exc
    w = B.T @ x
    w = np.linalg.solve(c.T, np.linalg.solve(c, w))
    return (x - B @ w) / zeta


def lowrank_diag_solve(diag_sq: np.ndarray, J: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Solve (diag(diag_sq) + J J^T) y = x with the same Woodbury trick.

    diag_sq holds the already-squared diagonal entries.
    """
    diag_sq = np.asarray(diag_sq, dtype=float)
    x = np.asarray(x, dtype=float)
    dinv = 1.0 / diag_sq
    if J is None or J.size == 0:
        return dinv * x
    w = J.shape[1]
    inner = np.eye(w) + (J.T * dinv) @ J
    c = np.linalg.cholesky(inner)
    t = J.T @ (dinv * x)
    t = np.linalg.solve(c.T, np.linalg.solve(c, t))
    return dinv * x - dinv * (J @ t)


def lowrank_diag_logdet(diag_sq: np.ndarray, J: np.ndarray) -> float:
    """log det(diag(diag_sq) + J J^T) via the matrix determinant lemma."""
    diag_sq = np.asarray(diag_sq, dtype=float)
    out = float(np.sum(np.log(diag_sq)))
    if J is not None and J.size > 0:
        dinv = 1.0 / diag_sq
        inner = np.eye(J.shape[1]) + (J.T * dinv) @ J
        sign, ld = np.linalg.slogdet(inner)
        if sign <= 0:  # pragma: no cover - SPD by construction
            raise np.linalg.LinAlgError("low-rank update lost positive definiteness")
        out += float(ld)
    return out


# ---------------------------------------------------------------------------
# Rank-1 Cholesky updates
# ---------------------------------------------------------------------------

def _chol_rank1_update_inplace(L: np.ndarray, x: np.ndarray) -> None:
    # classic O(d^2) update: L L^T + x x^T, overwrites L and destroys x
    d = L.shape[0]
    for k in range(d):
        lkk = L[k, k]
        r = math.hypot(lkk, x[k])
        c = r / lkk
        s = x[k] / lkk
        L[k, k] = r
        if k + 1 < d:
            L[k + 1:, k] = (L[k + 1:, k] + s * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - s * L[k + 1:, k]


def cholesky_rank1_updates(zeta: float, B: np.ndarray | None) -> "LowerTriangular":
    """Lower Cholesky factor of zeta*I + B B^T via p sequential rank-1 updates.

    Starts from sqrt(zeta)*I and folds in one column of B at a time,
    each update costing O(d^2).
    """
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    if B is None or B.size == 0:
        d = 0 if B is None else B.shape[0]
        if d == 0:
            raise ValueError("cannot infer dimension from an empty B with no rows")
        return LowerTriangular.from_dense(math.sqrt(zeta) * np.eye(d), pattern="dense")
    B = np.asarray(B, dtype=float)
    d = B.shape[0]
    L = math.sqrt(zeta) * np.eye(d)
    for j in range(B.shape[1]):
        _chol_rank1_update_inplace(L, B[:, j].copy())
    if not np.all(np.diag(L) > 0.0):  # pragma: no cover - cannot occur for valid inputs
        raise np.linalg.LinAlgError("rank-1 updates lost positive definiteness")
    return LowerTriangular.from_dense(L, pattern="dense")


def cholesky_rank1_updates_jvp(
    zeta: float,
    B: np.ndarray,
    dzeta: float,
    dB: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode derivative of the rank-1 update recurrence.

    Returns (L, dL) where L is the Cholesky factor of zeta*I + B B^T and
    dL is its directional derivative along (dzeta, dB).  Differentiates
    the update recurrence step by step rather than the final factor.
    """
    B = np.asarray(B, dtype=float)
    d = B.shape[0]
    s0 = math.sqrt(zeta)
    L = s0 * np.eye(d)
    dL = (dzeta / (2.0 * s0)) * np.eye(d)
    for j in range(B.shape[1]):
        x = B[:, j].copy()
        dx = dB[:, j].copy()
        for k in range(d):
            lkk, dlkk = L[k, k], dL[k, k]
            xk, dxk = x[k], dx[k]
            r = math.hypot(lkk, xk)
            dr = (lkk * dlkk + xk * dxk) / r
            c = r / lkk
            dc = (dr * lkk - r * dlkk) / (lkk * lkk)
            s = xk / lkk
            ds = (dxk * lkk - xk * dlkk) / (lkk * lkk)
            L[k, k] = r
            dL[k, k] = dr
            if k + 1 < d:
                col = L[k + 1:, k].copy()
                dcol = dL[k + 1:, k].copy()
                tail = x[k + 1:].copy()
                dtail = dx[k + 1:].copy()
                new_col = (col + s * tail) / c
                dnew_col = ((dcol + ds * tail + s * dtail) - new_col * dc) / c
                x[k + 1:] = c * tail - s * new_col
                dx[k + 1:] = dc * tail + c * dtail - ds * new_col - s * dnew_col
                L[k + 1:, k] = new_col
                dL[k + 1:, k] = dnew_col
    return L, dL


# ---------------------------------------------------------------------------
# Banded triangular solves
# ---------------------------------------------------------------------------

def banded_unit_lower_solve(Linv: "LowerTriangular", z: np.ndarray) -> np.ndarray:
    """Forward substitution for a unit-diagonal banded lower factor.

    Solves Linv x = z touching only in-band entries, O(d*k).
    """
    if Linv.pattern not in ("unit-banded", "unit-dense"):
        raise ValueError("banded_unit_lower_solve expects a unit-diagonal factor")
    z = np.asarray(z, dtype=float)
    x = z.copy()
    d = Linv.dim
    k = Linv.bandwidth if Linv.pattern == "unit-banded" else d - 1
    for i in range(1, d):
        j0 = max(0, i - k)
        row = Linv.row_slice(i, j0)
        if row.size:
            x[i] -= row @ x[j0:i]
    return x


def banded_unit_upper_solve(Linv: "LowerTriangular", v: np.ndarray) -> np.ndarray:
    """Back substitution with the transpose of a unit-diagonal lower factor."""
    if Linv.pattern not in ("unit-banded", "unit-dense"):
        raise ValueError("banded_unit_upper_solve expects a unit-diagonal factor")
    v = np.asarray(v, dtype=float)
    x = v.copy()
    d = Linv.dim
    k = Linv.bandwidth if Linv.pattern == "unit-banded" else d - 1
    for j in range(d - 2, -1, -1):
        i1 = min(d, j + k + 1)
        col = Linv.col_slice(j, i1)
        if col.size:
            x[j] -= col @ x[j + 1:i1]
    return x


# ---------------------------------------------------------------------------
# Matrix value types
# ---------------------------------------------------------------------------

@dataclass
class LowerTriangular:
    """Lower-triangular matrix with packed column-major storage.

    Patterns:
      * ``dense``        -- all entries on and below the diagonal
      * ``unit-dense``   -- strictly-below-diagonal entries, implicit unit diag
      * ``unit-banded``  -- strictly-below entries within ``bandwidth`` of the
                            diagonal, implicit unit diag
      * ``diagonal``     -- diagonal entries only
    """

    dim: int
    pattern: str
    storage: np.ndarray
    bandwidth: int = 0
    # column start offsets into the packed storage
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = [self._col_count(j) for j in range(self.dim)]
        if self.storage.shape != (int(np.sum(counts)),):
            raise ValueError(
                f"storage length {self.storage.shape} does not match "
                f"pattern {self.pattern!r} at dim {self.dim}"
            )
        self._offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)

    def _col_count(self, j: int) -> int:
        if self.pattern == "dense":
            return self.dim - j
        if self.pattern == "unit-dense":
            return self.dim - j - 1
        if self.pattern == "unit-banded":
            return min(self.bandwidth, self.dim - j - 1)
        if self.pattern == "diagonal":
            return 1
        raise ValueError(f"unknown pattern {self.pattern!r}")

    def _col_rows(self, j: int) -> tuple[int, int]:
        # half-open row range stored for column j (excludes implicit unit diag)
        if self.pattern == "dense":
            return j, self.dim
        if self.pattern == "unit-dense":
            return j + 1, self.dim
        if self.pattern == "unit-banded":
            return j + 1, min(self.dim, j + 1 + self.bandwidth)
        if self.pattern == "diagonal":
            return j, j + 1
        raise ValueError(f"unknown pattern {self.pattern!r}")

    @classmethod
    def zeros(cls, dim: int, pattern: str = "dense", bandwidth: int = 0) -> "LowerTriangular":
        tmp = cls.__new__(cls)
        tmp.dim, tmp.pattern, tmp.bandwidth = dim, pattern, bandwidth
        counts = sum(tmp._col_count(j) for j in range(dim))
        return cls(dim, pattern, np.zeros(counts), bandwidth)

    @classmethod
    def identity(cls, dim: int, pattern: str = "unit-dense", bandwidth: int = 0) -> "LowerTriangular":
        out = cls.zeros(dim, pattern, bandwidth)
        if pattern == "dense":
            for j in range(dim):
                out.storage[out._offsets[j]] = 1.0
        elif pattern == "diagonal":
            out.storage[:] = 1.0
        return out

    @classmethod
    def from_dense(cls, M: np.ndarray, pattern: str = "dense", bandwidth: int = 0) -> "LowerTriangular":
        M = np.asarray(M, dtype=float)
        dim = M.shape[0]
        out = cls.zeros(dim, pattern, bandwidth)
        for j in range(dim):
            r0, r1 = out._col_rows(j)
            out.storage[out._offsets[j]:out._offsets[j + 1]] = M[r0:r1, j]
        return out

    def to_dense(self) -> np.ndarray:
        M = np.zeros((self.dim, self.dim))
        if self.pattern in ("unit-dense", "unit-banded"):
            np.fill_diagonal(M, 1.0)
        for j in range(self.dim):
            r0, r1 = self._col_rows(j)
            M[r0:r1, j] = self.storage[self._offsets[j]:self._offsets[j + 1]]
        return M

    def col_slice(self, j: int, i1: int | None = None) -> np.ndarray:
        """Stored sub-diagonal entries of column j up to row i1 (exclusive)."""
        r0, r1 = self._col_rows(j)
        seg = self.storage[self._offsets[j]:self._offsets[j + 1]]
        if i1 is None or i1 >= r1:
            return seg
        return seg[: max(0, i1 - r0)]

    def row_slice(self, i: int, j0: int) -> np.ndarray:
        """Stored entries of row i for columns j0..i-1 (unit patterns only)."""
        cols = range(j0, i)
        vals = np.empty(len(cols))
        for idx, j in enumerate(cols):
            r0, _ = self._col_rows(j)
            vals[idx] = self.storage[self._offsets[j] + (i - r0)]
        return vals

    def matvec(self, z: np.ndarray) -> np.ndarray:
        """L @ z using only stored entries."""
        z = np.asarray(z, dtype=float)
        if self.pattern == "diagonal":
            return self.storage * z
        out = z.copy() if self.pattern in ("unit-dense", "unit-banded") else np.zeros(self.dim)
        for j in range(self.dim):
            r0, r1 = self._col_rows(j)
            out[r0:r1] += self.storage[self._offsets[j]:self._offsets[j + 1]] * z[j]
        return out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        """L.T @ v using only stored entries."""
        v = np.asarray(v, dtype=float)
        if self.pattern == "diagonal":
            return self.storage * v
        out = v.copy() if self.pattern in ("unit-dense", "unit-banded") else np.zeros(self.dim)
        for j in range(self.dim):
            r0, r1 = self._col_rows(j)
            out[j] += self.storage[self._offsets[j]:self._offsets[j + 1]] @ v[r0:r1]
        return out

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve L x = b by forward substitution."""
        b = np.asarray(b, dtype=float)
        if self.pattern == "diagonal":
            return b / self.storage
        if self.pattern in ("unit-dense", "unit-banded"):
            return banded_unit_lower_solve(self, b)
        x = b.copy()
        for j in range(self.dim):
            seg = self.storage[self._offsets[j]:self._offsets[j + 1]]
            x[j] /= seg[0]
            if seg.size > 1:
                x[j + 1:] -= seg[1:] * x[j]
        return x

    def logdet(self) -> float:
        if self.pattern in ("unit-dense", "unit-banded"):
            return 0.0
        if self.pattern == "diagonal":
            return float(np.sum(np.log(self.storage)))
        diag = np.array([self.storage[self._offsets[j]] for j in range(self.dim)])
        return float(np.sum(np.log(diag)))

    def diagonal(self) -> np.ndarray:
        if self.pattern in ("unit-dense", "unit-banded"):
            return np.ones(self.dim)
        if self.pattern == "diagonal":
            return self.storage.copy()
        return np.array([self.storage[self._offsets[j]] for j in range(self.dim)])


@dataclass
class FactorScale:
    """Low-rank-plus-diagonal scale E = J J^T + diag(diag_raw)^2.

    ``diag_raw`` entries are unconstrained reals; they enter E squared, so E
    is symmetric positive definite whenever every entry is nonzero.
    """

    dim: int
    factor: np.ndarray  # (dim, rank)
    diag_raw: np.ndarray  # (dim,)

    def __post_init__(self):
        self.factor = np.asarray(self.factor, dtype=float).reshape(self.dim, -1)
        self.diag_raw = np.asarray(self.diag_raw, dtype=float)
        if self.factor.shape[1] >= self.dim:
            raise ValueError("rank must be strictly less than dim")

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def diag_sq(self) -> np.ndarray:
        return self.diag_raw ** 2

    def matvec(self, z: np.ndarray) -> np.ndarray:
        """E @ z in O(dim * rank)."""
        return self.factor @ (self.factor.T @ z) + self.diag_sq() * z

    def solve(self, y: np.ndarray) -> np.ndarray:
        return lowrank_diag_solve(self.diag_sq(), self.factor, y)

    def logdet(self) -> float:
        return lowrank_diag_logdet(self.diag_sq(), self.factor)

    def to_dense(self) -> np.ndarray:
        return self.factor @ self.factor.T + np.diag(self.diag_sq())
