"""Forward and lateral movement models: log-posterior, MAP fit, Laplace draws.

Forward model, per frame of competitor ``k`` at cumulative distance ``j``::

    d_forward ~ N(spline_k(j) + jockey + context + X_for @ psi_f, sigma_f)   [truncated below 0]

with ``spline_k(j) = basis(j) @ theta_k``. Lateral model::

    d_lateral ~ N(beta * prev_lat_movement + jockey + context + X_lat @ psi_l, sigma_l)

Spline rows are shrunk towards a shared (fitted, flat-prior) mean profile
``mu``; jockey and context effects towards zero. Noise scales are optimised
as ``log sigma`` with a half-normal prior on ``sigma`` (no Jacobian term, so
the mode is the mode in ``sigma``).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.linalg import cho_factor, solve_triangular
from scipy.special import log_ndtr

from .covariates import FORWARD_COLUMNS, LATERAL_COLUMNS
from .optim import OptimizationError, lbfgs
from .spline import BSplineBasis, SplineSpec, build_basis

log = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    spline_scale: float = 0.5
    effect_scale: float = 0.1
    coef_scale: float = 1.0
    plm_scale: float = 1.0
    sigma_scale: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PriorConfig":
        return cls(**{k: float(v) for k, v in (d or {}).items()})


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 2000
    rel_tol: float = 1e-8
    grad_tol: float = 1e-5
    memory: int = 20
    truncate: bool = True


# --------------------------------------------------------------------------
# standardisation


@dataclass(frozen=True)
class Standardizer:
    names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, names) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
        sd = X.std(axis=0) if len(X) else np.ones(X.shape[1])
        scale = np.where(sd > 1e-12, sd, 1.0)
        return cls(tuple(names), mean, scale)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


# --------------------------------------------------------------------------
# designs


@dataclass
class Design:
    """Response plus everything needed to form the model mean.

    ``kind`` is ``"forward"`` or ``"lateral"``. Covariates in ``X`` are
    already standardised. For the forward model ``basis_rows``/``horse``
    index the spline; for the lateral model ``plm`` is the previous lateral
    movement.
    """

    kind: str
    y: np.ndarray
    X: np.ndarray
    jockey: np.ndarray
    context: np.ndarray
    jockeys: tuple[str, ...]
    contexts: tuple[str, ...]
    covariates: tuple[str, ...]
    standardizer: Standardizer | None = None
    horse: np.ndarray | None = None
    horses: tuple[str, ...] = ()
    basis_rows: np.ndarray | None = None
    plm: np.ndarray | None = None
    truncate: bool = False
    _A: sparse.csr_matrix | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def layout(self) -> "Layout":
        d = 0 if self.basis_rows is None else self.basis_rows.shape[1]
        return Layout.for_model(self.kind, len(self.horses), d, len(self.jockeys), len(self.contexts), len(self.covariates))

    @property
    def A(self) -> sparse.csr_matrix:
        """Sparse map from the mean-parameter block to the per-row mean."""
        if self._A is None:
            self._A = _mean_matrix(self)
        return self._A


@dataclass(frozen=True)
class Layout:
    kind: str
    blocks: tuple[tuple[str, int], ...]
    n_horses: int = 0
    dim: int = 0

    @classmethod
    def for_model(cls, kind, n_horses, dim, n_jockeys, n_contexts, n_cov):
        if kind == "forward":
            blocks = (("theta", n_horses * dim), ("mu", dim), ("jockey", n_jockeys),
                      ("context", n_contexts), ("psi", n_cov), ("log_sigma", 1))
        elif kind == "lateral":
            blocks = (("beta", 1), ("jockey", n_jockeys), ("context", n_contexts),
                      ("psi", n_cov), ("log_sigma", 1))
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        return cls(kind, blocks, n_horses, dim)

    @property
    def size(self) -> int:
        return sum(n for _, n in self.blocks)

    @property
    def n_mean(self) -> int:
        return self.size - 1

    def slice(self, name: str) -> slice:
        start = 0
        for b, n in self.blocks:
            if b == name:
                return slice(start, start + n)
            start += n
        raise KeyError(name)

    def unpack(self, p) -> dict:
        p = np.asarray(p, dtype=float)
        out = {b: p[..., self.slice(b)] for b, _ in self.blocks}
        if self.kind == "forward":
            out["theta"] = out["theta"].reshape(p.shape[:-1] + (self.n_horses, self.dim))
        out["sigma"] = np.exp(out.pop("log_sigma")[..., 0])
        if self.kind == "lateral":
            out["beta"] = out["beta"][..., 0]
        return out

    def pack(self, values: dict) -> np.ndarray:
        parts = []
        for b, n in self.blocks:
            if b == "log_sigma":
                parts.append(np.atleast_1d(np.log(values["sigma"])))
            else:
                parts.append(np.asarray(values[b], dtype=float).reshape(-1))
        p = np.concatenate(parts) if parts else np.zeros(0)
        if p.size != self.size:
            raise ValueError(f"packed size {p.size} != layout size {self.size}")
        return p


def _mean_matrix(design: Design) -> sparse.csr_matrix:
    lay = design.layout
    n = design.n
    rows, cols, vals = [], [], []
    if design.kind == "forward":
        B = design.basis_rows
        d = B.shape[1]
        nz_r, nz_c = np.nonzero(B)
        rows.append(nz_r)
        cols.append(design.horse[nz_r] * d + nz_c)
        vals.append(B[nz_r, nz_c])
    else:
        rows.append(np.arange(n))
        cols.append(np.full(n, lay.slice("beta").start))
        vals.append(design.plm.astype(float))
    if len(design.jockeys):
        rows.append(np.arange(n))
        cols.append(lay.slice("jockey").start + design.jockey)
        vals.append(np.ones(n))
    if len(design.contexts):
        rows.append(np.arange(n))
        cols.append(lay.slice("context").start + design.context)
        vals.append(np.ones(n))
    P = design.X.shape[1]
    if P:
        rows.append(np.repeat(np.arange(n), P))
        cols.append(np.tile(lay.slice("psi").start + np.arange(P), n))
        vals.append(design.X.reshape(-1))
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, lay.n_mean)
    )
    A.sum_duplicates()
    return A


def _index(values, levels=None):
    vals = pd.Index(np.asarray(values).astype(str))
    if levels is None:
        levels = tuple(sorted(set(vals)))
    lookup = {v: i for i, v in enumerate(levels)}
    return np.array([lookup[v] for v in vals], dtype=np.int64), tuple(levels)


def make_design(rows: pd.DataFrame, kind: str, basis: BSplineBasis | None = None, truncate: bool = True,
                standardizer: Standardizer | None = None) -> Design:
    """Build a :class:`Design` from design-row records.

    ``rows`` needs the covariate columns of the model, ``jockey_id``,
    ``race_context``, the response (``d_forward`` / ``d_lateral``) and, for
    the forward model, ``horse_id`` and ``cumulative_forward``; for the
    lateral model ``prev_lat_movement``.
    """
    names = FORWARD_COLUMNS if kind == "forward" else LATERAL_COLUMNS
    X = rows[list(names)].to_numpy(dtype=float) if len(rows) else np.zeros((0, len(names)))
    std = standardizer or Standardizer.fit(X, names)
    jockey, jockeys = _index(rows["jockey_id"])
    context, contexts = _index(rows["race_context"])
    common = dict(kind=kind, X=std.transform(X), jockey=jockey, context=context, jockeys=jockeys,
                  contexts=contexts, covariates=tuple(names), standardizer=std)
    if kind == "forward":
        basis = basis or build_basis()
        y = rows["d_forward"].to_numpy(dtype=float)
        if truncate and np.any(y < 0):
            log.warning("clipping %d negative forward movements to 0 for the truncated model", int((y < 0).sum()))
            y = np.maximum(y, 0.0)
        horse, horses = _index(rows["horse_id"])
        return Design(y=y, horse=horse, horses=horses,
                      basis_rows=basis.rows(rows["cumulative_forward"].to_numpy(dtype=float)),
                      truncate=truncate, **common)
    if kind == "lateral":
        return Design(y=rows["d_lateral"].to_numpy(dtype=float),
                      plm=rows["prev_lat_movement"].to_numpy(dtype=float), **common)
    raise ValueError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# log posterior


def _normal_logpdf(x, scale):
    return -0.5 * np.square(x / scale) - math.log(scale) - _LOG_SQRT_2PI


def _row_terms(design: Design, m: np.ndarray, s: float, order: int):
    """Per-row log-likelihood and derivatives w.r.t. mean ``m`` and ``s = log sigma``."""
    sigma = math.exp(s)
    z = (design.y - m) / sigma
    ll = -0.5 * z * z - s - _LOG_SQRT_2PI
    out = {"ll": ll}
    if order >= 1:
        out["dm"] = z / sigma
        out["ds"] = z * z - 1.0
    if order >= 2:
        out["dmm"] = np.full_like(m, -1.0 / sigma**2)
        out["dms"] = -2.0 * z / sigma
        out["dss"] = -2.0 * z * z
    if design.truncate:
        a = m / sigma
        logPhi = log_ndtr(a)
        out["ll"] = ll - logPhi
        if order >= 1:
            lam = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - logPhi)
            out["dm"] = out["dm"] - lam / sigma
            out["ds"] = out["ds"] + a * lam
        if order >= 2:
            dlam = -lam * (a + lam)
            out["dmm"] = out["dmm"] - dlam / sigma**2
            out["dms"] = out["dms"] + (a * dlam + lam) / sigma
            out["dss"] = out["dss"] - (a * lam + a * a * dlam)
    return out


def _check(design: Design, p: np.ndarray) -> tuple[Layout, np.ndarray]:
    lay = design.layout
    p = np.asarray(p, dtype=float)
    if p.shape != (lay.size,):
        raise ValueError(f"parameter vector has shape {p.shape}, expected ({lay.size},)")
    return lay, p


def _prior_parts(lay: Layout, p: np.ndarray, prior: PriorConfig):
    """Log prior, gradient and (diagonal + theta/mu coupling) Hessian pieces."""
    lp = 0.0
    g = np.zeros_like(p)
    blocks = []
    if lay.kind == "forward":
        th = p[lay.slice("theta")].reshape(lay.n_horses, lay.dim)
        mu = p[lay.slice("mu")]
        dev = th - mu
        lp += _normal_logpdf(dev, prior.spline_scale).sum()
        g[lay.slice("theta")] = (-dev / prior.spline_scale**2).reshape(-1)
        g[lay.slice("mu")] = dev.sum(axis=0) / prior.spline_scale**2
    else:
        b = p[lay.slice("beta")]
        lp += _normal_logpdf(b, prior.plm_scale).sum()
        g[lay.slice("beta")] = -b / prior.plm_scale**2
        blocks.append(("beta", prior.plm_scale))
    for name, scale in (("jockey", prior.effect_scale), ("context", prior.effect_scale), ("psi", prior.coef_scale)):
        v = p[lay.slice(name)]
        lp += _normal_logpdf(v, scale).sum()
        g[lay.slice(name)] = -v / scale**2
        blocks.append((name, scale))
    s = p[lay.slice("log_sigma")][0]
    sig = math.exp(s)
    lp += math.log(2.0) + float(_normal_logpdf(sig, prior.sigma_scale))
    g[lay.slice("log_sigma")] = -sig * sig / prior.sigma_scale**2
    return lp, g, blocks


def log_posterior(p, design: Design, prior: PriorConfig = PriorConfig()) -> float:
    """Log posterior (up to the flat prior on ``mu``) at packed parameters ``p``."""
    lay, p = _check(design, p)
    s = p[lay.slice("log_sigma")][0]
    if not np.isfinite(s):
        raise DomainError("sigma must be positive and finite")
    lp, _, _ = _prior_parts(lay, p, prior)
    if design.n == 0:
        return float(lp)
    if design.truncate and np.any(design.y < 0):
        return -math.inf
    m = design.A @ p[: lay.n_mean]
    return float(lp + _row_terms(design, m, s, 0)["ll"].sum())


def gradient(p, design: Design, prior: PriorConfig = PriorConfig()) -> np.ndarray:
    return value_and_gradient(p, design, prior)[1]


def value_and_gradient(p, design: Design, prior: PriorConfig = PriorConfig()) -> tuple[float, np.ndarray]:
    lay, p = _check(design, p)
    s = p[lay.slice("log_sigma")][0]
    if not np.isfinite(s):
        raise DomainError("sigma must be positive and finite")
    lp, g, _ = _prior_parts(lay, p, prior)
    if design.n:
        m = design.A @ p[: lay.n_mean]
        t = _row_terms(design, m, s, 1)
        lp += t["ll"].sum()
        g[: lay.n_mean] += design.A.T @ t["dm"]
        g[lay.slice("log_sigma")] += t["ds"].sum()
    return float(lp), g


def hessian(p, design: Design, prior: PriorConfig = PriorConfig()) -> np.ndarray:
    """Dense Hessian of :func:`log_posterior`."""
    lay, p = _check(design, p)
    s = p[lay.slice("log_sigma")][0]
    P = lay.size
    H = np.zeros((P, P))
    nm = lay.n_mean
    if design.n:
        m = design.A @ p[:nm]
        t = _row_terms(design, m, s, 2)
        A = design.A
        H[:nm, :nm] = (A.T @ sparse.diags(t["dmm"]) @ A).toarray()
        cross = A.T @ t["dms"]
        H[:nm, nm] = cross
        H[nm, :nm] = cross
        H[nm, nm] += t["dss"].sum()
    _, _, blocks = _prior_parts(lay, p, prior)
    idx = np.arange(P)
    if lay.kind == "forward":
        th, mu = lay.slice("theta"), lay.slice("mu")
        c = 1.0 / prior.spline_scale**2
        H[idx[th], idx[th]] -= c
        H[idx[mu], idx[mu]] -= c * lay.n_horses
        for h in range(lay.n_horses):
            rows = th.start + h * lay.dim + np.arange(lay.dim)
            H[rows, idx[mu]] += c
            H[idx[mu], rows] += c
    for name, scale in blocks:
        sl = lay.slice(name)
        H[idx[sl], idx[sl]] -= 1.0 / scale**2
    sig = math.exp(s)
    H[nm, nm] -= 2.0 * sig * sig / prior.sigma_scale**2
    return H


def _hessian_diagonal(p, design: Design, prior: PriorConfig) -> np.ndarray:
    """Diagonal of ``-hessian`` used to precondition L-BFGS."""
    lay = design.layout
    s = p[lay.slice("log_sigma")][0]
    diag = np.zeros(lay.size)
    if design.n:
        m = design.A @ p[: lay.n_mean]
        t = _row_terms(design, m, s, 2)
        diag[: lay.n_mean] = design.A.power(2).T @ (-t["dmm"])
        diag[-1] = -t["dss"].sum()
    if lay.kind == "forward":
        diag[lay.slice("theta")] += 1.0 / prior.spline_scale**2
        diag[lay.slice("mu")] += lay.n_horses / prior.spline_scale**2
    else:
        diag[lay.slice("beta")] += 1.0 / prior.plm_scale**2
    for name, scale in (("jockey", prior.effect_scale), ("context", prior.effect_scale), ("psi", prior.coef_scale)):
        diag[lay.slice(name)] += 1.0 / scale**2
    diag[-1] += 2.0 * math.exp(2 * s) / prior.sigma_scale**2
    return np.maximum(diag, 1e-8)


# --------------------------------------------------------------------------
# fitting


@dataclass
class ModelFit:
    """MAP estimate of one model plus its Laplace curvature factor."""

    kind: str
    layout: Layout
    params: np.ndarray
    horses: tuple[str, ...]
    jockeys: tuple[str, ...]
    contexts: tuple[str, ...]
    covariates: tuple[str, ...]
    standardizer: Standardizer
    truncate: bool
    chol: np.ndarray | None = None  # lower Cholesky factor of the negative Hessian
    fallback_scales: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def values(self) -> dict:
        return self.layout.unpack(self.params)

    def covariance_diagonal(self) -> np.ndarray:
        if self.chol is None:
            return np.square(self.fallback_scales)
        inv = solve_triangular(self.chol, np.eye(len(self.params)), lower=True)
        return np.square(inv).sum(axis=0)


def prior_mode(design: Design) -> np.ndarray:
    """Starting point: all effects 0, every spline row equal to a flat mean profile."""
    lay = design.layout
    p = np.zeros(lay.size)
    ybar = float(design.y.mean()) if design.n else 0.0
    ysd = float(design.y.std()) if design.n > 1 else 1.0
    if lay.kind == "forward":
        p[lay.slice("mu")] = ybar
        p[lay.slice("theta")] = ybar
    p[lay.slice("log_sigma")] = math.log(max(ysd, 1e-3))
    return p


def fit_map(design: Design, prior: PriorConfig = PriorConfig(), config: FitConfig = FitConfig()) -> ModelFit:
    """Maximise the log posterior with preconditioned L-BFGS from the prior mode."""
    if design.n == 0:
        raise ValueError("cannot fit a model to an empty design")
    x0 = prior_mode(design)

    def objective(x):
        try:
            f, g = value_and_gradient(x, design, prior)
        except (DomainError, FloatingPointError, OverflowError):
            return math.inf, np.full_like(x, np.nan)
        return -f, -g

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        pre = _hessian_diagonal(x0, design, prior)
        res = lbfgs(objective, x0, max_iter=config.max_iter, rel_tol=config.rel_tol,
                    grad_tol=config.grad_tol, memory=config.memory, precond=pre)
    if not np.isfinite(res.fun):
        raise OptimizationError("optimisation ended at a non-finite objective", {"iterations": res.iterations})
    diagnostics = {
        "iterations": res.iterations,
        "converged": bool(res.converged),
        "message": res.message,
        "grad_max_norm": res.grad_max_norm,
        "log_posterior": -res.fun,
        "n_rows": design.n,
    }
    fit = ModelFit(
        kind=design.kind,
        layout=design.layout,
        params=res.x,
        horses=design.horses,
        jockeys=design.jockeys,
        contexts=design.contexts,
        covariates=design.covariates,
        standardizer=design.standardizer,
        truncate=design.truncate,
        diagnostics=diagnostics,
    )
    attach_curvature(fit, design, prior)
    return fit


def attach_curvature(fit: ModelFit, design: Design, prior: PriorConfig) -> ModelFit:
    H = -hessian(fit.params, design, prior)
    H = 0.5 * (H + H.T)
    try:
        c, _ = cho_factor(H, lower=True)
        fit.chol = np.tril(c)
        fit.fallback_scales = None
    except np.linalg.LinAlgError:
        log.warning("%s curvature is not positive definite; using prior-scale diagonal draws", fit.kind)
        fit.chol = None
        fit.fallback_scales = _prior_scales(fit.layout, prior)
    return fit


def _prior_scales(lay: Layout, prior: PriorConfig) -> np.ndarray:
    out = np.zeros(lay.size)
    scales = {"theta": prior.spline_scale, "mu": prior.spline_scale, "jockey": prior.effect_scale,
              "context": prior.effect_scale, "psi": prior.coef_scale, "beta": prior.plm_scale, "log_sigma": 0.1}
    for name, _ in lay.blocks:
        out[lay.slice(name)] = scales[name]
    return out


def laplace_draws(fit: ModelFit, n: int, seed=None) -> np.ndarray:
    """``n`` packed parameter draws from the Gaussian approximation at the MAP."""
    if n < 0:
        raise ValueError("number of draws must be non-negative")
    P = len(fit.params)
    if n == 0:
        return np.zeros((0, P))
    z = np.random.default_rng(seed).standard_normal((n, P))
    if fit.chol is None:
        return fit.params + z * fit.fallback_scales
    # H = L L^T  ->  x = L^{-T} z has covariance H^{-1}
    return fit.params + solve_triangular(fit.chol, z.T, lower=True, trans="T").T


def jockey_ratings(fit: ModelFit) -> pd.DataFrame:
    """Forward-model jockey effects at the MAP, best first (ties alphabetical)."""
    if fit.kind != "forward":
        raise ValueError("jockey ratings come from the forward model")
    eff = fit.values["jockey"]
    sd = np.sqrt(fit.covariance_diagonal()[fit.layout.slice("jockey")])
    df = pd.DataFrame({"jockey_id": list(fit.jockeys), "rating": eff, "posterior_sd": sd})
    df = df.sort_values(["rating", "jockey_id"], ascending=[False, True], kind="mergesort").reset_index(drop=True)
    df.insert(0, "rank", np.arange(1, len(df) + 1))
    return df


# --------------------------------------------------------------------------
# parameter files

PARAMS_FORMAT = "racesim-params"
PARAMS_VERSION = 1


class ParamsVersionError(ValueError):
    pass


def _fit_to_dict(fit: ModelFit) -> dict:
    return {
        "kind": fit.kind,
        "blocks": [[b, n] for b, n in fit.layout.blocks],
        "n_horses": fit.layout.n_horses,
        "dim": fit.layout.dim,
        "values": {k: np.asarray(v).tolist() for k, v in fit.values.items()},
        "params": fit.params.tolist(),
        "horses": list(fit.horses),
        "jockeys": list(fit.jockeys),
        "contexts": list(fit.contexts),
        "covariates": list(fit.covariates),
        "standardization": {"mean": fit.standardizer.mean.tolist(), "scale": fit.standardizer.scale.tolist()},
        "truncate": fit.truncate,
        "curvature_cholesky": None if fit.chol is None else fit.chol.tolist(),
        "fallback_scales": None if fit.fallback_scales is None else fit.fallback_scales.tolist(),
        "diagnostics": fit.diagnostics,
    }


def _fit_from_dict(d: dict) -> ModelFit:
    layout = Layout(d["kind"], tuple((b, int(n)) for b, n in d["blocks"]), int(d["n_horses"]), int(d["dim"]))
    std = Standardizer(tuple(d["covariates"]), np.asarray(d["standardization"]["mean"], dtype=float),
                       np.asarray(d["standardization"]["scale"], dtype=float))
    chol = d.get("curvature_cholesky")
    fb = d.get("fallback_scales")
    params = np.asarray(d["params"], dtype=float)
    if params.size != layout.size:
        raise ValueError(f"{d['kind']} parameter vector has {params.size} entries, layout needs {layout.size}")
    return ModelFit(
        kind=d["kind"], layout=layout, params=params,
        horses=tuple(d["horses"]), jockeys=tuple(d["jockeys"]), contexts=tuple(d["contexts"]),
        covariates=tuple(d["covariates"]), standardizer=std, truncate=bool(d["truncate"]),
        chol=None if chol is None else np.asarray(chol, dtype=float),
        fallback_scales=None if fb is None else np.asarray(fb, dtype=float),
        diagnostics=dict(d.get("diagnostics", {})),
    )


@dataclass
class FittedParams:
    """Both fitted models plus what simulation needs to reuse them."""

    forward: ModelFit
    lateral: ModelFit
    spline: SplineSpec = field(default_factory=SplineSpec)
    prior: PriorConfig = field(default_factory=PriorConfig)
    drag: dict = field(default_factory=dict)
    frame_period: float = 0.25
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "spline": self.spline.to_dict(),
            "prior": self.prior.to_dict(),
            "drag": self.drag,
            "frame_period": self.frame_period,
            "provenance": self.provenance,
            "forward": _fit_to_dict(self.forward),
            "lateral": _fit_to_dict(self.lateral),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedParams":
        if d.get("format") != PARAMS_FORMAT:
            raise ParamsVersionError(f"not a parameter file (format {d.get('format')!r})")
        if d.get("version") != PARAMS_VERSION:
            raise ParamsVersionError(f"unsupported parameter file version {d.get('version')!r}; expected {PARAMS_VERSION}")
        return cls(
            forward=_fit_from_dict(d["forward"]),
            lateral=_fit_from_dict(d["lateral"]),
            spline=SplineSpec.from_dict(d["spline"]),
            prior=PriorConfig.from_dict(d.get("prior")),
            drag=dict(d.get("drag") or {}),
            frame_period=float(d.get("frame_period", 0.25)),
            provenance=dict(d.get("provenance") or {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True, allow_nan=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FittedParams":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParamsVersionError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def fit_models(rows: pd.DataFrame, spline: SplineSpec = SplineSpec(), prior: PriorConfig = PriorConfig(),
               config: FitConfig = FitConfig(), drag: dict | None = None, frame_period: float = 0.25,
               provenance: dict | None = None) -> FittedParams:
    """Fit the forward and lateral models independently on design rows."""
    basis = build_basis(spline)
    fwd = fit_map(make_design(rows, "forward", basis, truncate=config.truncate), prior, config)
    lat = fit_map(make_design(rows, "lateral"), prior, config)
    return FittedParams(fwd, lat, spline, prior, dict(drag or {}), frame_period, dict(provenance or {}))
