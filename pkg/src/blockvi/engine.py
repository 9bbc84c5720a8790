"""Variational engine: assemble a partition, vector copula, and per-block
transport maps into one approximation; estimate the ELBO and its exact
single-draw reparameterized gradient; run ADAM or ADADELTA.

The flat parameter vector is unconstrained.  Positive quantities are stored
as square roots, warp parameters through a scaled logistic onto (0, 2), the
coupling vector l through 2*sigmoid - 1 onto (-1, 1); semi-orthogonal
factors are stored raw, with their gradients projected to the tangent space
and a QR retraction applied after each optimizer step.

``elbo_gradient`` returns the exact total derivative of the single-draw
estimate (the quantity finite differences of ``elbo_estimate`` at fixed
noise recover), which is an unbiased estimator of the ELBO gradient.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .copulas import (
    BlockPartition,
    GvcFactor,
    GvcOrtho,
    IndependenceVC,
    KvcGauss,
    NestedVC,
)
from .kernels import FactorScale, LowerTriangular, normal_logpdf
from .maps import (
    M1Params,
    M2Params,
    m1_forward_from_z,
    m1_log_density,
    m2_forward_from_z,
    m2_log_density,
    map_param_jacobian_apply,
    map_pullback_to_z,
    yj_d2k_dx2_over_dk,
    yj_dlogderiv_deta,
)

__all__ = [
    "MarginalSpec",
    "VaAssembly",
    "VariationalState",
    "ElboTrace",
    "OptimizerConfig",
    "DivergenceError",
    "assemble_va",
    "elbo_estimate",
    "elbo_gradient",
    "run_sgd",
    "sample_theta_batch",
    "gaussian_moments",
    "save_checkpoint",
    "load_checkpoint",
]


class DivergenceError(RuntimeError):
    """Raised after too many consecutive non-finite gradient draws."""


# ---------------------------------------------------------------------------
# Unconstrained-parameter transforms
# ---------------------------------------------------------------------------

def _constrain(tag, x):
    if tag in ("identity", "stiefel"):
        return x
    if tag == "square":
        return x * x
    if tag == "sigmoid02":
        return 2.0 * expit(x)
    if tag == "tanh1":
        return 2.0 * expit(x) - 1.0
    raise ValueError(f"unknown transform {tag!r}")


def _dconstrain(tag, x_unc, x_con):
    if tag in ("identity", "stiefel"):
        return np.ones_like(np.asarray(x_unc, dtype=float))
    if tag == "square":
        return 2.0 * x_unc
    if tag == "sigmoid02":
        return x_con * (2.0 - x_con) / 2.0
    if tag == "tanh1":
        return (1.0 - x_con * x_con) / 2.0
    raise ValueError(f"unknown transform {tag!r}")


def _unconstrain(tag, x):
    x = np.asarray(x, dtype=float)
    if tag in ("identity", "stiefel"):
        return x
    if tag == "square":
        return np.sqrt(x)
    if tag == "sigmoid02":
        return np.log(x / (2.0 - x))
    if tag == "tanh1":
        return np.log((1.0 + x) / (1.0 - x))
    raise ValueError(f"unknown transform {tag!r}")


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple
    transform: str
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


# ---------------------------------------------------------------------------
# Marginal specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginalSpec:
    """Per-block map choice: kind m1/m2, L pattern, warp flag, M2 rank."""

    kind: str = "m1"
    lpattern: str = "identity"  # identity | dense | banded-L | banded-Linv
    bandwidth: int = 1
    warp: bool = False
    rank: int = 1

    def entries(self, dj: int, prefix: str):
        out = [(prefix + "b", (dj,), "identity"), ]
        if self.kind == "m1":
            out.append((prefix + "s", (dj,), "square"))
            if self.lpattern != "identity":
                probe = LowerTriangular.zeros(
                    dj,
                    pattern="unit-dense" if self.lpattern == "dense" else "unit-banded",
                    bandwidth=self.bandwidth,
                )
                out.append((prefix + "L", (probe.storage.size,), "identity"))
        elif self.kind == "m2":
            if not 1 <= self.rank < dj:
                raise ValueError(f"m2 rank must satisfy 1 <= w < {dj}")
            out.append((prefix + "J", (dj, self.rank), "identity"))
            out.append((prefix + "D", (dj,), "identity"))
        else:
            raise ValueError(f"unknown marginal kind {self.kind!r}")
        if self.warp:
            out.append((prefix + "eta", (dj,), "sigmoid02"))
        return out

    def init_values(self, dj: int, prefix: str, rng):
        vals = {prefix + "b": np.zeros(dj)}
        if self.kind == "m1":
            vals[prefix + "s"] = 0.1 * np.ones(dj)
            if self.lpattern != "identity":
                probe = LowerTriangular.zeros(
                    dj,
                    pattern="unit-dense" if self.lpattern == "dense" else "unit-banded",
                    bandwidth=self.bandwidth,
                )
                vals[prefix + "L"] = np.zeros(probe.storage.size)
        else:
            vals[prefix + "J"] = 0.01 * rng.standard_normal((dj, self.rank))
            vals[prefix + "D"] = 0.1 * np.ones(dj)
        if self.warp:
            vals[prefix + "eta"] = np.ones(dj)
        return vals

    def build_params(self, dj: int, prefix: str, values: dict):
        eta = values.get(prefix + "eta")
        if self.kind == "m1":
            L = None
            if self.lpattern != "identity":
                L = LowerTriangular(
                    dj,
                    "unit-dense" if self.lpattern == "dense" else "unit-banded",
                    np.asarray(values[prefix + "L"], dtype=float),
                    self.bandwidth,
                )
            return M1Params(b=values[prefix + "b"], s=values[prefix + "s"],
                            L=L, lpattern=self.lpattern, eta=eta)
        scale = FactorScale(dj, values[prefix + "J"], values[prefix + "D"])
        return M2Params(b=values[prefix + "b"], scale=scale, eta=eta)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

class VariationalState:
    """Flat unconstrained lambda plus an index map naming every slice."""

    def __init__(self, entries, lam=None):
        self.entries = list(entries)
        self.size = self.entries[-1].stop if self.entries else 0
        self.lam = np.zeros(self.size) if lam is None else np.asarray(lam, dtype=float)
        if self.lam.size != self.size:
            raise ValueError("flat vector does not match index map")
        self.step = 0
        self.opt: dict = {}

    @classmethod
    def from_specs(cls, specs):
        entries, start = [], 0
        for name, shape, transform in specs:
            size = int(np.prod(shape)) if shape else 1
            entries.append(ParamEntry(name, tuple(shape), transform, start, start + size))
            start += size
        return cls(entries)

    def names(self):
        out = []
        for e in self.entries:
            if e.size == 1:
                out.append(e.name)
            else:
                out.extend(f"{e.name}[{i}]" for i in range(e.size))
        return out

    def set_constrained(self, values: dict):
        for e in self.entries:
            v = np.asarray(values[e.name], dtype=float).ravel()
            self.lam[e.start:e.stop] = _unconstrain(e.transform, v)

    def unpack(self, lam=None) -> dict:
        lam = self.lam if lam is None else lam
        out = {}
        for e in self.entries:
            raw = lam[e.start:e.stop]
            con = _constrain(e.transform, raw)
            out[e.name] = con.reshape(e.shape) if e.shape else float(con[0])
        return out

    def chain_to_flat(self, grads: dict, lam=None) -> np.ndarray:
        """Apply d constrained / d unconstrained to named gradients."""
        lam = self.lam if lam is None else lam
        flat = np.zeros(self.size)
        for e in self.entries:
            g = grads.get(e.name)
            if g is None:
                continue
            raw = lam[e.start:e.stop]
            con = _constrain(e.transform, raw)
            gv = np.asarray(g, dtype=float).ravel()
            flat[e.start:e.stop] = gv * _dconstrain(e.transform, raw, con)
        return flat


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

class VaAssembly:
    """A partition, a vector copula, and one marginal map per block."""

    def __init__(self, partition: BlockPartition, copula, marginals, name="custom"):
        if len(marginals) != partition.nblocks:
            raise ValueError("need one marginal spec per block")
        self.partition = partition
        self.copula = copula
        self.marginals = list(marginals)
        self.name = name

    # -- state ----------------------------------------------------------
    def param_specs(self):
        specs = [("vc." + n, s, t) for n, s, t in self.copula.param_spec()]
        for j, (mspec, dj) in enumerate(zip(self.marginals, self.partition.sizes)):
            specs.extend(mspec.entries(dj, f"m{j}."))
        return specs

    def init_state(self, seed=0) -> VariationalState:
        rng = np.random.default_rng(seed)
        state = VariationalState.from_specs(self.param_specs())
        values = {"vc." + k: v for k, v in self.copula.init_params(rng).items()}
        for j, (mspec, dj) in enumerate(zip(self.marginals, self.partition.sizes)):
            values.update(mspec.init_values(dj, f"m{j}.", rng))
        state.set_constrained(values)
        return state

    def n_params(self) -> int:
        return VariationalState.from_specs(self.param_specs()).size

    # -- noise ----------------------------------------------------------
    def draw_noise(self, rng):
        eps_n = rng.standard_normal(self.copula.n_normals)
        eps_e = rng.standard_exponential(self.copula.n_expons) if self.copula.n_expons else None
        return eps_n, eps_e

    # -- forward --------------------------------------------------------
    def _vc_params(self, values: dict) -> dict:
        return {k[3:]: v for k, v in values.items() if k.startswith("vc.")}

    def _map_params(self, values: dict):
        return [
            mspec.build_params(dj, f"m{j}.", values)
            for j, (mspec, dj) in enumerate(zip(self.marginals, self.partition.sizes))
        ]

    def forward(self, values: dict, noise):
        eps_n, eps_e = noise
        vc = self._vc_params(values)
        cache = self.copula.sample(vc, eps_n, eps_e)
        z = cache["z"]
        maps = self._map_params(values)
        theta = np.empty(self.partition.dim)
        inters = []
        for params, sl in zip(maps, self.partition.slices()):
            if isinstance(params, M1Params):
                theta[sl], y = m1_forward_from_z(params, z[sl])
            else:
                theta[sl], y = m2_forward_from_z(params, z[sl])
            inters.append((z[sl], y))
        return theta, cache, maps, inters

    def marginal_logq(self, maps, theta, inters) -> float:
        total = 0.0
        for params, sl, inter in zip(maps, self.partition.slices(), inters):
            if isinstance(params, M1Params):
                total += m1_log_density(params, theta[sl], inter)
            else:
                total += m2_log_density(params, theta[sl], inter)
        return total


# ---------------------------------------------------------------------------
# ELBO estimate and gradient
# ---------------------------------------------------------------------------

def elbo_estimate(assembly: VaAssembly, target, state: VariationalState, noise,
                  lam=None) -> float:
    values = state.unpack(lam)
    theta, cache, maps, inters = assembly.forward(values, noise)
    vc = assembly._vc_params(values)
    return (
        float(target.logh(theta))
        + assembly.copula.neg_log_c(vc, cache)
        - assembly.marginal_logq(maps, theta, inters)
    )


def _density_param_grads(params, inter):
    """Gradient of +log|det d theta/d z| w.r.t. map parameters (z fixed)."""
    z, y = inter
    if isinstance(params, M1Params):
        grads = {"s": 1.0 / params.s}
        if params.eta is not None:
            grads["eta"] = yj_dlogderiv_deta(y, params.eta)
            ratio = yj_d2k_dx2_over_dk(y, params.eta)
        else:
            ratio = np.zeros_like(y)
        if params.lpattern != "identity":
            from .kernels import banded_unit_upper_solve
            from .maps import _outer_on_pattern
            if params.lpattern == "banded-Linv":
                left = banded_unit_upper_solve(params.L, ratio)
                grads["L"] = _outer_on_pattern(params.L, -left, y)
            else:
                grads["L"] = _outer_on_pattern(params.L, ratio, z)
        return grads
    # M2: log|det E| plus the warp term through y = E z
    J, draw = params.scale.factor, params.scale.diag_raw
    dj, w = J.shape
    dinv = 1.0 / (draw * draw)
    K = np.linalg.inv(np.eye(w) + (J.T * dinv) @ J)
    EinvJ = (dinv[:, None] * J) @ K
    diag_Einv = dinv - dinv ** 2 * np.sum((J @ K) * J, axis=1)
    grads = {"J": 2.0 * EinvJ, "D": 2.0 * draw * diag_Einv}
    if params.eta is not None:
        grads["eta"] = yj_dlogderiv_deta(y, params.eta)
        ratio = yj_d2k_dx2_over_dk(y, params.eta)
        grads["J"] = grads["J"] + np.outer(ratio, J.T @ z) + np.outer(z, J.T @ ratio)
        grads["D"] = grads["D"] + 2.0 * draw * z * ratio
    return grads


def _density_pullback_to_z(params, inter):
    """Gradient of [-sum log phi(z) + log|det d theta/d z|] w.r.t. z."""
    z, y = inter
    if params.eta is None:
        return z.copy()
    ratio = yj_d2k_dx2_over_dk(y, params.eta)
    if isinstance(params, M1Params):
        return z + params.core_rmatvec(ratio)
    return z + params.scale.matvec(ratio)


def elbo_gradient(assembly: VaAssembly, target, state: VariationalState, noise,
                  lam=None):
    """Exact gradient of the single-draw estimate; returns (estimate, flat)."""
    values = state.unpack(lam)
    theta, cache, maps, inters = assembly.forward(values, noise)
    vc = assembly._vc_params(values)

    logh = float(target.logh(theta))
    est = logh + assembly.copula.neg_log_c(vc, cache) \
        - assembly.marginal_logq(maps, theta, inters)

    gamma = np.asarray(target.grad(theta), dtype=float)
    grads: dict = {}
    zbar = np.empty(assembly.partition.dim)
    for j, (params, sl, inter) in enumerate(
            zip(maps, assembly.partition.slices(), inters)):
        gj = map_param_jacobian_apply(params, inter, gamma[sl])
        dens = _density_param_grads(params, inter)
        for k, v in dens.items():
            key = "diag_raw" if k == "D" else k
            gj[key] = gj.get(key, 0.0) + v
        rename = {"diag_raw": "D"}
        for k, v in gj.items():
            grads[f"m{j}." + rename.get(k, k)] = v
        zbar[sl] = map_pullback_to_z(params, inter, gamma[sl]) \
            + _density_pullback_to_z(params, inter)

    for k, v in assembly.copula.param_grads(vc, cache, zbar).items():
        grads["vc." + k] = v
    return est, state.chain_to_flat(grads, lam)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.95  # adadelta decay
    adadelta_eps: float = 1e-6

    def init_state(self, n: int) -> dict:
        if self.kind == "adam":
            return {"m": np.zeros(n), "v": np.zeros(n)}
        if self.kind == "adadelta":
            return {"eg2": np.zeros(n), "ed2": np.zeros(n)}
        raise ValueError(f"unknown optimizer {self.kind!r}")

    def step(self, opt: dict, grad: np.ndarray, t: int) -> np.ndarray:
        """Ascent step for the given gradient; mutates accumulators."""
        if self.kind == "adam":
            opt["m"] = self.beta1 * opt["m"] + (1 - self.beta1) * grad
            opt["v"] = self.beta2 * opt["v"] + (1 - self.beta2) * grad * grad
            mhat = opt["m"] / (1 - self.beta1 ** t)
            vhat = opt["v"] / (1 - self.beta2 ** t)
            return self.lr * mhat / (np.sqrt(vhat) + self.eps)
        opt["eg2"] = self.rho * opt["eg2"] + (1 - self.rho) * grad * grad
        delta = (np.sqrt(opt["ed2"] + self.adadelta_eps)
                 / np.sqrt(opt["eg2"] + self.adadelta_eps)) * grad
        opt["ed2"] = self.rho * opt["ed2"] + (1 - self.rho) * delta * delta
        return delta


def _stiefel_project(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    sym = Q.T @ G
    return G - Q @ (0.5 * (sym + sym.T))


def _qr_retract(Q: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(Q)
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# Traces and the SGD loop
# ---------------------------------------------------------------------------

@dataclass
class ElboTrace:
    steps: np.ndarray
    elbo: np.ndarray
    elapsed_ns: np.ndarray

    def summary(self, window: int = 1000) -> float:
        w = min(window, self.elbo.size)
        return float(np.median(self.elbo[-w:]))

    def rows(self):
        for s, e, t in zip(self.steps, self.elbo, self.elapsed_ns):
            yield int(s), float(e), int(t)


def run_sgd(assembly: VaAssembly, target, optimizer: OptimizerConfig | None = None,
            steps: int = 40_000, seed: int = 0, state: VariationalState | None = None,
            rng_state: dict | None = None, max_consecutive_divergent: int = 50):
    """Single-draw reparameterized SGD; deterministic given seed.

    Non-finite draws are skipped with parameters and accumulators untouched;
    more than ``max_consecutive_divergent`` in a row aborts.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    opt = optimizer or OptimizerConfig()
    if state is None:
        state = assembly.init_state(seed)
    if not state.opt:
        state.opt = opt.init_state(state.size)
    rng = np.random.default_rng(seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state

    stiefel = [e for e in state.entries if e.transform == "stiefel"]
    trace_steps = np.empty(steps, dtype=np.int64)
    trace_elbo = np.empty(steps)
    trace_ns = np.empty(steps, dtype=np.int64)
    t0 = time.perf_counter_ns()
    consecutive_bad = 0

    for i in range(steps):
        noise = assembly.draw_noise(rng)
        est, grad = elbo_gradient(assembly, target, state, noise)
        if not (math.isfinite(est) and np.all(np.isfinite(grad))):
            consecutive_bad += 1
            if consecutive_bad > max_consecutive_divergent:
                raise DivergenceError(
                    f"{consecutive_bad} consecutive non-finite draws at step "
                    f"{state.step}; last estimate {est!r}"
                )
            trace_steps[i] = state.step
            trace_elbo[i] = trace_elbo[i - 1] if i else np.nan
            trace_ns[i] = time.perf_counter_ns() - t0
            state.step += 1
            continue
        consecutive_bad = 0
        for e in stiefel:
            Q = state.lam[e.start:e.stop].reshape(e.shape)
            g = grad[e.start:e.stop].reshape(e.shape)
            grad[e.start:e.stop] = _stiefel_project(Q, g).ravel()
        state.step += 1
        state.lam += opt.step(state.opt, grad, state.step)
        for e in stiefel:
            Q = state.lam[e.start:e.stop].reshape(e.shape)
            state.lam[e.start:e.stop] = _qr_retract(Q).ravel()
        trace_steps[i] = state.step
        trace_elbo[i] = est
        trace_ns[i] = time.perf_counter_ns() - t0

    trace = ElboTrace(trace_steps, trace_elbo, trace_ns)
    return state, trace, rng.bit_generator.state


# ---------------------------------------------------------------------------
# Posterior draws and Gaussian moments
# ---------------------------------------------------------------------------

def sample_theta_batch(assembly: VaAssembly, state: VariationalState, rng, n: int):
    """n draws of theta from the fitted approximation (dense block algebra)."""
    values = state.unpack()
    vc = assembly._vc_params(values)
    u, z = assembly.copula.sample_batch(vc, rng, n)
    maps = assembly._map_params(values)
    theta = np.empty((n, assembly.partition.dim))
    for params, sl in zip(maps, assembly.partition.slices()):
        zj = z[:, sl]
        if isinstance(params, M1Params):
            if params.lpattern == "identity":
                y = zj
            elif params.lpattern == "banded-Linv":
                y = np.linalg.solve(params.L.to_dense(), zj.T).T
            else:
                y = zj @ params.L.to_dense().T
            core = y if params.eta is None else _batch_warp(y, params.eta)
            theta[:, sl] = params.b + params.s * core
        else:
            y = zj @ params.scale.to_dense().T
            core = y if params.eta is None else _batch_warp(y, params.eta)
            theta[:, sl] = params.b + core
    return theta


def _batch_warp(y, eta):
    from .maps import yj_inverse
    out = np.empty_like(y)
    for i in range(y.shape[0]):
        out[i] = yj_inverse(y[i], eta)
    return out


def gaussian_moments(assembly: VaAssembly, state: VariationalState):
    """(mean, cov) of the approximation when it is exactly Gaussian.

    Requires identity warps everywhere and a Gaussian copula (or
    independence); raises otherwise.
    """
    values = state.unpack()
    maps = assembly._map_params(values)
    for p in maps:
        if p.eta is not None:
            raise ValueError("assembly is not Gaussian: learned warps present")
    if isinstance(assembly.copula, (KvcGauss, NestedVC)):
        raise ValueError("assembly is not Gaussian: non-Gaussian copula")
    omega = assembly.copula.dense_corr(assembly._vc_params(values))
    d = assembly.partition.dim
    S = np.zeros((d, d))
    mean = np.empty(d)
    for params, sl in zip(maps, assembly.partition.slices()):
        mean[sl] = params.b
        if isinstance(params, M1Params):
            Ld = np.eye(sl.stop - sl.start) if params.L is None else params.L.to_dense()
            if params.lpattern == "banded-Linv":
                Ld = np.linalg.inv(Ld)
            S[sl, sl] = np.diag(params.s) @ Ld
        else:
            S[sl, sl] = params.scale.to_dense()
    return mean, S @ omega @ S.T


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, assembly: VaAssembly, state: VariationalState,
                    optimizer: OptimizerConfig, rng_state: dict | None = None):
    payload = {
        "version": 1,
        "assembly": assembly.name,
        "entries": [
            {"name": e.name, "shape": list(e.shape), "transform": e.transform}
            for e in state.entries
        ],
        "lam": state.lam.tolist(),
        "step": state.step,
        "optimizer": {
            "kind": optimizer.kind,
            "accumulators": {k: v.tolist() for k, v in state.opt.items()},
        },
        "rng_state": rng_state,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, assembly: VaAssembly):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError("unsupported checkpoint version")
    state = VariationalState.from_specs(assembly.param_specs())
    saved = payload["entries"]
    if [e.name for e in state.entries] != [s["name"] for s in saved]:
        raise ValueError("checkpoint does not match this assembly")
    state.lam = np.asarray(payload["lam"], dtype=float)
    state.step = int(payload["step"])
    state.opt = {
        k: np.asarray(v, dtype=float)
        for k, v in payload["optimizer"]["accumulators"].items()
    }
    rng_state = payload.get("rng_state")
    return state, rng_state


# ---------------------------------------------------------------------------
# Named families
# ---------------------------------------------------------------------------

def _parse_marginal(token: str, lpattern="identity", bandwidth=1, rank=1):
    token = token.upper()
    warp = token.endswith("-YJ") or token.endswith("+YJ")
    if warp:
        token = token[:-3]
    if token == "M1":
        return MarginalSpec("m1", lpattern=lpattern, bandwidth=bandwidth, warp=warp)
    if token == "M2":
        return MarginalSpec("m2", rank=rank, warp=warp)
    raise ValueError(f"unknown marginal token {token!r}")


def assemble_va(family: str, partition: BlockPartition, *,
                lpattern: str = "identity", bandwidth: int = 1,
                m2_rank: int = 1, seed_hint: int = 0) -> VaAssembly:
    """Build a named approximation family over the given partition.

    Recognized names: GMF, G-F<p>, GC-F<p>, BLK, BLK-C, A1..A7, IND&...,
    GVC-F<p>&..., GVC-I&..., GVC-O&..., KVC-G&..., NESTED&... /
    NESTED(KVC-G*GVC-I)&..., each "&" followed by M1/M2 with optional -YJ.
    """
    raw = family
    fam = family.upper().replace(" ", "")
    d = partition.dim

    if fam == "GMF":
        part = partition
        cop = IndependenceVC(part)
        margs = [MarginalSpec("m1", lpattern="identity") for _ in part.sizes]
        return VaAssembly(part, cop, margs, name=raw)
    if fam.startswith(("G-F", "GC-F")):
        p = int(fam.split("F", 1)[1])
        part = BlockPartition((d,))
        cop = IndependenceVC(part)
        margs = [MarginalSpec("m2", rank=p, warp=fam.startswith("GC"))]
        return VaAssembly(part, cop, margs, name=raw)
    if fam in ("BLK", "BLK-C", "BLK(M1)", "BLK-C(M1)"):
        warp = fam.startswith("BLK-C")
        cop = IndependenceVC(partition)
        margs = [
            MarginalSpec("m1", lpattern=lpattern, bandwidth=bandwidth, warp=warp)
            for _ in partition.sizes
        ]
        return VaAssembly(partition, cop, margs, name=raw)
    if fam in ("BLK(M2)", "BLK-C(M2)"):
        warp = fam.startswith("BLK-C")
        cop = IndependenceVC(partition)
        margs = [MarginalSpec("m2", rank=m2_rank, warp=warp) for _ in partition.sizes]
        return VaAssembly(partition, cop, margs, name=raw)
    if fam in ("A1", "A2"):
        return assemble_va(("GVC-F5&M1" + ("-YJ" if fam == "A2" else "")), partition)
    if fam in ("A3", "A4"):
        return assemble_va(("GVC-I&M1" + ("-YJ" if fam == "A4" else "")), partition)
    if fam in ("A5", "A6"):
        return assemble_va(("GVC-I&M2" + ("-YJ" if fam == "A6" else "")), partition,
                           m2_rank=1)
    if fam == "A7":
        return assemble_va("NESTED&M1-YJ", partition)

    if "&" not in fam:
        raise ValueError(f"unrecognized family {family!r}")
    cop_tok, marg_tok = fam.split("&", 1)
    mspec = _parse_marginal(marg_tok, lpattern=lpattern, bandwidth=bandwidth,
                            rank=m2_rank)
    margs = [
        MarginalSpec(mspec.kind, lpattern=mspec.lpattern, bandwidth=mspec.bandwidth,
                     warp=mspec.warp,
                     rank=min(mspec.rank, max(1, dj - 1)) if mspec.kind == "m2" else mspec.rank)
        for dj in partition.sizes
    ]
    # singleton blocks fall back to a plain location-scale map
    for j, dj in enumerate(partition.sizes):
        if dj == 1 and margs[j].kind == "m2":
            margs[j] = MarginalSpec("m1", lpattern="identity", warp=margs[j].warp)

    if cop_tok == "IND":
        cop = IndependenceVC(partition)
    elif cop_tok.startswith("GVC-F"):
        cop = GvcFactor(partition, rank=int(cop_tok[5:]))
    elif cop_tok == "GVC-I":
        if partition.nblocks < 2 or partition.sizes[0] != partition.sizes[1]:
            raise ValueError("GVC-I couples the first two blocks, which must "
                             f"have equal sizes; got {partition.sizes}")
        cop = GvcOrtho(partition, identity_mode=True)
    elif cop_tok == "GVC-O":
        if partition.nblocks < 2:
            raise ValueError("GVC-O needs at least two blocks")
        cop = GvcOrtho(partition, identity_mode=False)
    elif cop_tok == "KVC-G":
        cop = KvcGauss(partition)
    elif cop_tok.startswith("NESTED"):
        if partition.nblocks < 2 or partition.sizes[0] != partition.sizes[1]:
            raise ValueError("nested family refines the first two equal-size blocks")
        m = partition.sizes[0]
        coarse = BlockPartition((2 * m,) + partition.sizes[2:])
        outer = KvcGauss(coarse)
        inner = GvcOrtho(BlockPartition((m, m)), identity_mode=True)
        cop = NestedVC(outer, inner, partition)
    else:
        raise ValueError(f"unrecognized copula token {cop_tok!r} in {family!r}")
    return VaAssembly(partition, cop, margs, name=raw)
