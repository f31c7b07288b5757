"""Gaussian copula model for mixed-type predictors with missing values.

Parameters are a Cholesky factor L of the latent correlation matrix (unit row
norms, so diag(L L^T) = 1) plus one marginal transform per variable: an
affine map z = c + d z* for continuous variables, or strictly increasing
thresholds for discrete ones, reparametrised as an unconstrained vector u
with c_1 = u_1 and c_k = c_{k-1} + exp(u_k).

Fitting maximises the observed-data likelihood by stochastic proximal ascent:
each iteration runs one Gibbs scan over the underlying normals (missing cells
from the unconstrained conditional, observed discrete cells from the
conditional truncated to the observed rectangle), accumulates single-sample
stochastic gradients, preconditions them by a frozen diagonal curvature
estimate, and projects back to the feasible set.  The returned estimate is
the average of the post-burn-in iterates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from ._normal import (
    LOG_SQRT_2PI,
    MASS_FLOOR,
    interval_prob,
    nearest_psd_correlation,
    norm_cdf,
    norm_pdf,
    norm_ppf,
    sample_trunc_norm,
    trunc_norm_mean,
)
from ._rng import rng_from
from .data import MixedDataset, empirical_mixed_correlation
from .errors import DataError, FitDivergenceError, NumericalError

_DIAG_MIN = 1e-6
_D_MIN = 1e-6
_H_FLOOR = 1e-4
_RATIO_CAP = 1e8
_DIVERGENCE_WINDOW = 50


def thresholds_from_u(u: np.ndarray) -> np.ndarray:
    """Strictly increasing thresholds c with c_1 = u_1, c_k = c_{k-1} + exp(u_k)."""
    u = np.asarray(u, dtype=float)
    c = np.empty_like(u)
    c[0] = u[0]
    if u.size > 1:
        c[1:] = u[0] + np.cumsum(np.exp(u[1:]))
    return c


def u_from_thresholds(c: np.ndarray) -> np.ndarray:
    """Inverse of thresholds_from_u."""
    c = np.asarray(c, dtype=float)
    if np.any(np.diff(c) <= 0):
        raise DataError("thresholds must be strictly increasing")
    u = np.empty_like(c)
    u[0] = c[0]
    if c.size > 1:
        u[1:] = np.log(np.diff(c))
    return u


@dataclass
class ContinuousMargin:
    """Affine margin z = c + d z*; d must be positive for a feasible model
    (pre-projection candidates may carry any d)."""

    c: float
    d: float


@dataclass
class DiscreteMargin:
    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim != 1 or self.u.size < 1:
            raise DataError("discrete margin needs at least one threshold")

    @property
    def thresholds(self) -> np.ndarray:
        return thresholds_from_u(self.u)

    @property
    def n_categories(self) -> int:
        return self.u.size + 1


@dataclass
class CopulaParams:
    """Cholesky factor plus marginal transforms (the full copula parameter set)."""

    L: np.ndarray
    margins: list

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        p = self.L.shape[0]
        if self.L.shape != (p, p) or len(self.margins) != p:
            raise DataError("L must be p x p with one margin per variable")

    @property
    def p(self) -> int:
        return self.L.shape[0]

    def sigma(self) -> np.ndarray:
        return self.L @ self.L.T

    def validate(self, tol: float = 1e-12) -> None:
        if np.any(np.triu(self.L, 1) != 0.0):
            raise DataError("L must be lower triangular")
        if np.any(np.diag(self.L) <= 1e-8):
            raise NumericalError("L diagonal entries must exceed 1e-8")
        row_norms = np.sum(self.L * self.L, axis=1)
        if np.max(np.abs(row_norms - 1.0)) > tol:
            raise NumericalError("rows of L must have unit norm (unit Sigma diagonal)")
        for j, m in enumerate(self.margins):
            if isinstance(m, ContinuousMargin) and not m.d > 0:
                raise NumericalError(f"margin {j}: scale d must be positive")

    def is_discrete(self, j: int) -> bool:
        return isinstance(self.margins[j], DiscreteMargin)

    def transform(self, j: int, zstar):
        """Apply the marginal map F_j to underlying values."""
        m = self.margins[j]
        if isinstance(m, ContinuousMargin):
            return m.c + m.d * np.asarray(zstar, dtype=float)
        thr = m.thresholds
        return np.searchsorted(thr, np.asarray(zstar, dtype=float), side="left").astype(float)

    def rectangle(self, j: int, code) -> tuple[np.ndarray, np.ndarray]:
        """Underlying interval (lo, hi] for observed discrete code(s)."""
        m = self.margins[j]
        edges = np.concatenate(([-np.inf], m.thresholds, [np.inf]))
        code = np.asarray(code, dtype=int)
        return edges[code], edges[code + 1]


@dataclass
class UnderlyingState:
    """Current Gibbs state of the underlying normals, one row per student."""

    zstar: np.ndarray

    def __post_init__(self):
        self.zstar = np.asarray(self.zstar, dtype=float)


@dataclass
class FitConfig:
    burn_in: int = 50
    iters: int = 150
    step_exponent: float = 0.51
    seed: int = 0
    gibbs_scans_per_iter: int = 1
    random_scan: bool = False

    def __post_init__(self):
        if self.burn_in < 1 or self.iters < 1:
            raise DataError("burn_in and iters must both be >= 1")
        if not (0.5 < self.step_exponent <= 1.0):
            raise DataError("step_exponent must lie in (0.5, 1]")


def project_feasible(params: CopulaParams) -> CopulaParams:
    """Project onto the feasible set: unit L row norms, positive diagonal,
    positive continuous scales.  Feasible inputs pass through bit-for-bit."""
    L = params.L
    new_L = L
    changed = False
    diag = np.diag(L).copy()
    if np.any(diag < _DIAG_MIN):
        new_L = L.copy()
        for j in np.flatnonzero(diag < _DIAG_MIN):
            new_L[j, j] = _DIAG_MIN
        changed = True
    norms2 = np.sum(new_L * new_L, axis=1)
    if np.max(np.abs(norms2 - 1.0)) > 4 * np.finfo(float).eps:
        new_L = (new_L if changed else new_L.copy()) / np.sqrt(norms2)[:, None]
        changed = True
    margins = params.margins
    new_margins = list(margins)
    m_changed = False
    for j, m in enumerate(margins):
        if isinstance(m, ContinuousMargin) and m.d < _D_MIN:
            new_margins[j] = ContinuousMargin(m.c, _D_MIN)
            m_changed = True
    if not changed and not m_changed:
        return params
    return CopulaParams(new_L if changed else params.L, new_margins)


# ---------------------------------------------------------------------------
# Density evaluation
# ---------------------------------------------------------------------------


def _ghk_rect_logprob(mean, cov, lo, hi, n_samples, rng):
    """GHK estimate of log P(lo < X <= hi) for X ~ N(mean, cov), with MC SE."""
    m = mean.size
    jitter = 1e-10 * max(1.0, float(np.max(np.abs(np.diag(cov)))))
    Lc = np.linalg.cholesky(cov + jitter * np.eye(m))
    logw = np.zeros(n_samples)
    draws = np.zeros((n_samples, m))
    for k in range(m):
        offset = mean[k] + draws[:, :k] @ Lc[k, :k]
        a = (lo[k] - offset) / Lc[k, k]
        b = (hi[k] - offset) / Lc[k, k]
        pk = interval_prob(a, b)
        logw += np.log(pk)
        draws[:, k] = sample_trunc_norm(0.0, 1.0, a, b, rng, size=n_samples)
    w = np.exp(logw)
    est = float(np.mean(w))
    se = float(np.std(w) / math.sqrt(n_samples))
    if est <= 0.0:
        return math.log(MASS_FLOOR), math.inf
    return math.log(est), se / est


def log_density_complete(
    z_row: np.ndarray,
    params: CopulaParams,
    n_mc: int = 4000,
    rng=None,
) -> tuple[float, float]:
    """Log density of a fully observed row; exact when all variables are
    continuous, otherwise a GHK Monte-Carlo estimate with its standard error.
    """
    z_row = np.asarray(z_row, dtype=float)
    p = params.p
    if z_row.shape != (p,):
        raise DataError("row length does not match parameter dimension")
    disc = np.array([params.is_discrete(j) for j in range(p)])
    cont = ~disc
    sigma = params.sigma()
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular latent correlation matrix") from exc

    log_jac = 0.0
    zstar_c = np.zeros(int(cont.sum()))
    for idx, j in enumerate(np.flatnonzero(cont)):
        m = params.margins[j]
        zstar_c[idx] = (z_row[j] - m.c) / m.d
        log_jac -= math.log(m.d)

    if not disc.any():
        sol = solve_triangular(chol, zstar_c, lower=True)
        logdet = float(np.sum(np.log(np.diag(chol))))
        val = -0.5 * float(sol @ sol) - logdet - p * LOG_SQRT_2PI + log_jac
        return val, 0.0

    if rng is None:
        rng = rng_from(0, 0xD1CE)
    d_idx = np.flatnonzero(disc)
    lo = np.empty(d_idx.size)
    hi = np.empty(d_idx.size)
    for t, j in enumerate(d_idx):
        l, h = params.rectangle(j, int(z_row[j]))
        lo[t], hi[t] = float(l), float(h)
    if cont.any():
        c_idx = np.flatnonzero(cont)
        s_cc = sigma[np.ix_(c_idx, c_idx)]
        s_dc = sigma[np.ix_(d_idx, c_idx)]
        s_dd = sigma[np.ix_(d_idx, d_idx)]
        chol_cc = np.linalg.cholesky(s_cc)
        sol = solve_triangular(chol_cc, zstar_c, lower=True)
        log_cont = (
            -0.5 * float(sol @ sol)
            - float(np.sum(np.log(np.diag(chol_cc))))
            - c_idx.size * LOG_SQRT_2PI
            + log_jac
        )
        w = solve_triangular(chol_cc, s_dc.T, lower=True)
        cond_mean = w.T @ sol
        cond_cov = s_dd - w.T @ w
    else:
        log_cont = 0.0
        cond_mean = np.zeros(d_idx.size)
        cond_cov = sigma
    log_rect, mc_se = _ghk_rect_logprob(cond_mean, cond_cov, lo, hi, n_mc, rng)
    return log_cont + log_rect, mc_se


# ---------------------------------------------------------------------------
# Gibbs sampling of the underlying normals
# ---------------------------------------------------------------------------


def _precision(params: CopulaParams) -> np.ndarray:
    Linv = solve_triangular(params.L, np.eye(params.p), lower=True)
    return Linv.T @ Linv


def gibbs_scan_all(
    values: np.ndarray,
    observed: np.ndarray,
    params: CopulaParams,
    zstar: np.ndarray,
    rng,
    order=None,
    lam: np.ndarray | None = None,
) -> None:
    """One systematic scan over all coordinates for every row, in place.

    Missing cells are drawn from the unconstrained univariate conditional,
    observed discrete cells from that conditional truncated to the observed
    rectangle; observed continuous cells are never touched.
    """
    p = params.p
    if lam is None:
        lam = _precision(params)
    cols = range(p) if order is None else order
    for j in cols:
        lam_jj = lam[j, j]
        if lam_jj <= 0:
            raise NumericalError(f"coordinate {j}: non-positive conditional precision")
        s = 1.0 / math.sqrt(lam_jj)
        w = zstar @ lam[:, j]
        mu = zstar[:, j] - w / lam_jj
        obs_j = observed[:, j]
        miss = ~obs_j
        if np.any(miss):
            zstar[miss, j] = mu[miss] + s * rng.standard_normal(int(miss.sum()))
        if params.is_discrete(j):
            rows = np.flatnonzero(obs_j)
            if rows.size:
                lo, hi = params.rectangle(j, values[rows, j].astype(int))
                zstar[rows, j] = sample_trunc_norm(mu[rows], s, lo, hi, rng)


def gibbs_sweep_marginal(
    row_index: int,
    ds: MixedDataset,
    params: CopulaParams,
    state: UnderlyingState,
    rng,
) -> np.ndarray:
    """One scan of the copula-only Gibbs sampler for a single row; returns the
    updated row (also stored back into the state)."""
    z = state.zstar[row_index : row_index + 1]
    gibbs_scan_all(
        ds.values[row_index : row_index + 1],
        ds.observed_mask[row_index : row_index + 1],
        params,
        z,
        rng,
    )
    state.zstar[row_index] = z[0]
    return state.zstar[row_index]


def init_underlying(values, observed, params: CopulaParams, rng=None) -> np.ndarray:
    """Initial z*: observed continuous exact, observed discrete at the marginal
    truncated mean of its rectangle, missing cells at zero."""
    n, p = values.shape
    zstar = np.zeros((n, p))
    for j in range(p):
        obs = observed[:, j]
        m = params.margins[j]
        if isinstance(m, ContinuousMargin):
            zstar[obs, j] = (values[obs, j] - m.c) / m.d
        else:
            lo, hi = params.rectangle(j, values[obs, j].astype(int))
            zstar[obs, j] = trunc_norm_mean(lo, hi)
    return zstar


# ---------------------------------------------------------------------------
# Stochastic gradients
# ---------------------------------------------------------------------------


@dataclass
class CopulaGradient:
    """Gradient contributions with the parameter structure of CopulaParams."""

    dc: np.ndarray
    dd: np.ndarray
    du: list
    dL: np.ndarray
    clipped_rows: int = 0


def _edge_stats(params, lam, zstar, values, observed, j):
    """Per-student conditional mean/sd of coordinate j plus that coordinate's
    observed rectangle edges; used by threshold gradients and curvature."""
    lam_jj = lam[j, j]
    s = 1.0 / math.sqrt(lam_jj)
    w = zstar @ lam[:, j]
    mu = zstar[:, j] - w / lam_jj
    rows = np.flatnonzero(observed[:, j])
    codes = values[rows, j].astype(int)
    lo, hi = params.rectangle(j, codes)
    return rows, codes, mu[rows], s, lo, hi


def _batch_gradients(values, observed, params, zstar, lam, want_curvature):
    """Summed stochastic gradients over all rows; optionally also the summed
    negative second derivatives used to build the preconditioner."""
    n, p = zstar.shape
    L = params.L
    V = zstar @ lam
    dc = np.zeros(p)
    dd = np.zeros(p)
    du = [None] * p
    clipped = 0
    hc = np.zeros(p)
    hd = np.zeros(p)
    hu = [None] * p
    for j in range(p):
        m = params.margins[j]
        if isinstance(m, ContinuousMargin):
            obs = observed[:, j]
            n_obs = int(obs.sum())
            if n_obs == 0:
                continue
            vj = V[obs, j]
            zj = zstar[obs, j]
            dc[j] = vj.sum() / m.d
            dd[j] = float(np.sum(zj * vj) - n_obs) / m.d
            if want_curvature:
                hc[j] = n_obs * lam[j, j] / (m.d * m.d)
                hd[j] = float(np.sum(2.0 * zj * vj + zj * zj * lam[j, j]) - n_obs) / (
                    m.d * m.d
                )
        else:
            rows, codes, mu, s, lo, hi = _edge_stats(params, lam, zstar, values, observed, j)
            k_thr = m.u.size
            du_j = np.zeros(k_thr)
            hu_j = np.zeros(k_thr)
            if rows.size:
                a = (lo - mu) / s
                b = (hi - mu) / s
                mass = interval_prob(a, b)
                q_hi = np.where(np.isfinite(b), norm_pdf(np.where(np.isfinite(b), b, 0.0)), 0.0) / (s * mass)
                q_lo = np.where(np.isfinite(a), norm_pdf(np.where(np.isfinite(a), a, 0.0)), 0.0) / (s * mass)
                over = (q_hi > _RATIO_CAP) | (q_lo > _RATIO_CAP)
                if np.any(over):
                    clipped += int(over.sum())
                    q_hi = np.minimum(q_hi, _RATIO_CAP)
                    q_lo = np.minimum(q_lo, _RATIO_CAP)
                # d xi / d c at the upper edge (threshold index codes+1) and
                # lower edge (threshold index codes); edges at +-inf are absent
                grad_edges = np.zeros((rows.size, k_thr))
                has_hi = codes < k_thr
                has_lo = codes > 0
                idx = np.arange(rows.size)
                grad_edges[idx[has_hi], codes[has_hi]] = q_hi[has_hi]
                grad_edges[idx[has_lo], codes[has_lo] - 1] -= q_lo[has_lo]
                jac = _threshold_jacobian(m.u)
                du_j = grad_edges.sum(axis=0) @ jac
                if want_curvature:
                    hu_j = _threshold_curvature(
                        m.u, jac, codes, a, b, q_hi, q_lo, s, k_thr, has_hi, has_lo
                    )
            du[j] = du_j
            hu[j] = hu_j
    Linv_zT = solve_triangular(L, zstar.T, lower=True)
    M = Linv_zT.T  # rows: L^-1 z*_i
    B = solve_triangular(L.T, np.eye(p), lower=False)  # (L^T)^-1, upper triangular
    dL = lam @ (zstar.T @ zstar) @ B
    dL -= n * np.diag(1.0 / np.diag(L))
    dL = np.tril(dL)
    grad = CopulaGradient(dc, dd, du, dL, clipped)
    curv = None
    if want_curvature:
        col_m2 = np.sum(M * M, axis=0)
        vtm = V.T @ M
        hL = np.outer(np.diag(lam), col_m2) + 2.0 * B * vtm
        hL -= n * np.diag(1.0 / np.diag(L) ** 2)
        hL = np.tril(hL)
        curv = CopulaGradient(hc, hd, hu, hL)
    return grad, curv


def _threshold_jacobian(u: np.ndarray) -> np.ndarray:
    """J[l, k] = d c_{l+1} / d u_{k+1}: 1 for k = 0, exp(u_k) for 1 <= k <= l."""
    k_thr = u.size
    jac = np.zeros((k_thr, k_thr))
    jac[:, 0] = 1.0
    for k in range(1, k_thr):
        jac[k:, k] = math.exp(u[k])
    return jac


def _threshold_curvature(u, jac, codes, a, b, q_hi, q_lo, s, k_thr, has_hi, has_lo):
    """Sum over students of -d^2 xi / d u_k^2 (diagonal curvature only)."""
    # second derivatives of xi with respect to the two active thresholds
    bb = np.where(np.isfinite(b), b, 0.0)
    aa = np.where(np.isfinite(a), a, 0.0)
    d2_hi = np.where(has_hi, (-bb) * q_hi / s - q_hi * q_hi, 0.0)
    d2_lo = np.where(has_lo, aa * q_lo / s - q_lo * q_lo, 0.0)
    cross = np.where(has_hi & has_lo, q_hi * q_lo, 0.0)
    out = np.zeros(k_thr)
    exp_u = np.concatenate(([0.0], np.exp(u[1:])))  # d^2 c_l / d u_k^2 factor
    for k in range(k_thr):
        # first-derivative coefficients of the active edges wrt u_k
        a_hi = np.where(has_hi, jac[np.minimum(codes, k_thr - 1), k], 0.0)
        a_lo = np.where(has_lo, jac[np.maximum(codes - 1, 0), k], 0.0)
        second = d2_hi * a_hi * a_hi + d2_lo * a_lo * a_lo + 2.0 * cross * a_hi * a_lo
        if k >= 1:
            curv_hi = np.where(has_hi & (codes >= k), q_hi * exp_u[k], 0.0)
            curv_lo = np.where(has_lo & (codes - 1 >= k), -q_lo * exp_u[k], 0.0)
            second = second + curv_hi + curv_lo
        out[k] = -np.sum(second)
    return out


def grad_loglik_sample(
    z_row: np.ndarray,
    observed_row: np.ndarray,
    zstar_row: np.ndarray,
    params: CopulaParams,
) -> CopulaGradient:
    """Single-sample stochastic gradient of one row's log density at the
    current parameters, given the imputed underlying row."""
    lam = _precision(params)
    grad, _ = _batch_gradients(
        np.asarray(z_row, dtype=float)[None, :],
        np.asarray(observed_row, dtype=bool)[None, :],
        params,
        np.asarray(zstar_row, dtype=float)[None, :],
        lam,
        want_curvature=False,
    )
    return grad


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class CopulaFitResult:
    params: CopulaParams
    loglik_trace: np.ndarray
    step_sizes: np.ndarray
    clipped_rows: int
    config: FitConfig


def default_init(ds: MixedDataset, min_overlap: int = 30, eig_floor: float = 0.05) -> CopulaParams:
    """Moment/frequency initialiser: empirical mixed correlation for Sigma,
    sample mean/SD for continuous margins, inverse-normal cumulative observed
    frequencies for thresholds.

    Pairwise complete-case correlations are biased under non-MCAR missingness
    and tetrachorics with extreme thresholds can be wild, so the initial
    matrix is projected with a generous eigenvalue floor; the likelihood fit
    is what corrects the estimate."""
    sigma0 = empirical_mixed_correlation(ds, min_overlap=min_overlap)
    sigma0 = nearest_psd_correlation(sigma0, eig_floor=eig_floor)
    L = np.linalg.cholesky(sigma0)
    margins = []
    for j, m in enumerate(ds.meta):
        col = ds.values[ds.observed_mask[:, j], j]
        if m.is_discrete:
            counts = np.bincount(col.astype(int), minlength=m.n_categories).astype(float)
            cum = np.clip(np.cumsum(counts)[:-1] / counts.sum(), 1e-7, 1 - 1e-7)
            thr = np.clip(norm_ppf(cum), -8.0, 8.0)
            for k in range(1, thr.size):
                if thr[k] <= thr[k - 1]:
                    thr[k] = thr[k - 1] + 1e-6
            margins.append(DiscreteMargin(u_from_thresholds(thr)))
        else:
            sd = col.std(ddof=1) if col.size > 1 else 1.0
            margins.append(ContinuousMargin(float(col.mean()), float(sd if sd > 0 else 1.0)))
    return project_feasible(CopulaParams(L, margins))


def _mean_psi(zstar, params, lam, observed):
    """Mean complete-data log density of the current imputation (trace metric)."""
    n, p = zstar.shape
    quad = np.einsum("ij,jk,ik->i", zstar, lam, zstar)
    logdet = float(np.sum(np.log(np.diag(params.L))))
    val = -0.5 * quad - logdet - p * LOG_SQRT_2PI
    for j in range(p):
        m = params.margins[j]
        if isinstance(m, ContinuousMargin):
            val -= observed[:, j] * math.log(m.d)
    return float(val.mean())


def _axpy_params(acc: CopulaParams, params: CopulaParams) -> None:
    acc.L += params.L
    for j, m in enumerate(params.margins):
        a = acc.margins[j]
        if isinstance(m, ContinuousMargin):
            acc.margins[j] = ContinuousMargin(a.c + m.c, a.d + m.d)
        else:
            a.u += m.u


def fit_copula(
    ds: MixedDataset,
    init: CopulaParams | None = None,
    cfg: FitConfig | None = None,
) -> CopulaFitResult:
    """Maximum likelihood for the copula parameters by stochastic proximal
    ascent; returns the average of post-burn-in iterates plus diagnostics."""
    if ds.n_rows == 0:
        raise DataError("empty dataset")
    cfg = cfg or FitConfig()
    params = project_feasible(init if init is not None else default_init(ds))
    values = ds.values
    observed = ds.observed_mask
    n, p = values.shape
    rng = rng_from(cfg.seed, 0xC0B)
    zstar = init_underlying(values, observed, params)

    total = cfg.burn_in + cfg.iters
    trace = np.zeros(total)
    steps = np.zeros(total)
    clipped = 0
    h_mean: CopulaGradient | None = None
    h_frozen: CopulaGradient | None = None
    avg: CopulaParams | None = None

    for t in range(1, total + 1):
        lam = _precision(params)
        order = rng.permutation(p) if cfg.random_scan else None
        for _ in range(cfg.gibbs_scans_per_iter):
            gibbs_scan_all(values, observed, params, zstar, rng, order=order, lam=lam)
        want_h = t <= cfg.burn_in
        grad, curv = _batch_gradients(values, observed, params, zstar, lam, want_h)
        clipped += grad.clipped_rows
        if want_h:
            if h_mean is None:
                h_mean = curv
            else:
                w_old = (t - 1) / t
                w_new = 1.0 / t
                h_mean.dc = w_old * h_mean.dc + w_new * curv.dc
                h_mean.dd = w_old * h_mean.dd + w_new * curv.dd
                h_mean.dL = w_old * h_mean.dL + w_new * curv.dL
                for j in range(p):
                    if h_mean.du[j] is not None:
                        h_mean.du[j] = w_old * h_mean.du[j] + w_new * curv.du[j]
            h_use = h_mean
            if t == cfg.burn_in:
                h_frozen = h_mean
        else:
            h_use = h_frozen
        gamma = t ** (-cfg.step_exponent)
        steps[t - 1] = gamma

        new_L = params.L + gamma * grad.dL / np.maximum(np.tril(h_use.dL), _H_FLOOR)
        new_margins = []
        for j, m in enumerate(params.margins):
            if isinstance(m, ContinuousMargin):
                hc = max(h_use.dc[j], _H_FLOOR)
                hd = max(h_use.dd[j], _H_FLOOR)
                new_margins.append(
                    ContinuousMargin(m.c + gamma * grad.dc[j] / hc, m.d + gamma * grad.dd[j] / hd)
                )
            else:
                hu = np.maximum(h_use.du[j], _H_FLOOR)
                new_margins.append(DiscreteMargin(m.u + gamma * grad.du[j] / hu))
        params = project_feasible(CopulaParams(np.tril(new_L), new_margins))

        trace[t - 1] = _mean_psi(zstar, params, _precision(params), observed)
        if t > cfg.burn_in:
            if avg is None:
                avg = CopulaParams(
                    params.L.copy(),
                    [
                        ContinuousMargin(m.c, m.d)
                        if isinstance(m, ContinuousMargin)
                        else DiscreteMargin(m.u.copy())
                        for m in params.margins
                    ],
                )
            else:
                _axpy_params(avg, params)
        _check_divergence(trace, t)

    inv_t = 1.0 / cfg.iters
    avg_L = avg.L * inv_t
    avg_margins = []
    for m in avg.margins:
        if isinstance(m, ContinuousMargin):
            avg_margins.append(ContinuousMargin(m.c * inv_t, max(m.d * inv_t, _D_MIN)))
        else:
            avg_margins.append(DiscreteMargin(m.u * inv_t))
    out = project_feasible(CopulaParams(avg_L, avg_margins))
    out.validate(tol=1e-10)
    return CopulaFitResult(out, trace, steps, clipped, cfg)


def _check_divergence(trace: np.ndarray, t: int) -> None:
    """Abort when the smoothed objective decreases monotonically across a full
    window (the averaged stochastic log-likelihood should trend upward)."""
    w = _DIVERGENCE_WINDOW
    if t < 2 * w:
        return
    smooth = np.convolve(trace[:t], np.ones(w) / w, mode="valid")
    recent = smooth[-w:]
    if np.all(np.diff(recent) < 0):
        raise FitDivergenceError(
            "copula fit diverged: smoothed objective decreased monotonically "
            f"over the last {w} iterations",
            diagnostics={"loglik_trace": trace[:t]},
        )


# ---------------------------------------------------------------------------
# Dummy covariance of g_j(Z_j) and serialization
# ---------------------------------------------------------------------------


def regularize_spectrum(params: CopulaParams, eig_floor: float = 0.01) -> CopulaParams:
    """Floor the spectrum of the implied correlation matrix and re-factor.

    Guards downstream knockoff construction against nearly singular fitted
    correlation matrices (which would drive the knockoff S diagonal to zero
    and make augmented designs numerically collinear).  A no-op whenever the
    fitted matrix already clears the floor."""
    sigma = params.sigma()
    if np.linalg.eigvalsh(sigma).min() >= eig_floor:
        return params
    fixed = nearest_psd_correlation(sigma, eig_floor=eig_floor)
    return project_feasible(CopulaParams(np.linalg.cholesky(fixed), params.margins))


def marginal_dummy_cov(params: CopulaParams, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Cov(g_j(Z_j)) and its symmetric square root under the fitted margins.

    Continuous: scalar d^2.  Discrete with survival values S_k = 1 - Phi(c_k):
    Cov(1(Z>=k), 1(Z>=l)) = S_max(k,l) - S_k S_l.
    """
    m = params.margins[j]
    if isinstance(m, ContinuousMargin):
        return np.array([[m.d * m.d]]), np.array([[m.d]])
    surv = 1.0 - norm_cdf(m.thresholds)
    cov = np.minimum.outer(surv, surv) - np.outer(surv, surv)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 1e-10)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return cov, root


def params_to_dict(params: CopulaParams, names=None, fit_meta: dict | None = None) -> dict:
    margins = []
    for j, m in enumerate(params.margins):
        entry: dict = {"index": j}
        if names is not None:
            entry["name"] = names[j]
        if isinstance(m, ContinuousMargin):
            entry.update(kind="continuous", c=m.c, d=m.d)
        else:
            entry.update(kind="discrete", u=list(m.u), thresholds=list(m.thresholds))
        margins.append(entry)
    out = {"L": [list(row) for row in params.L], "margins": margins}
    if fit_meta:
        out["fit"] = fit_meta
    return out


def params_from_dict(payload: dict) -> CopulaParams:
    L = np.array(payload["L"], dtype=float)
    margins = []
    for entry in payload["margins"]:
        if entry["kind"] == "continuous":
            margins.append(ContinuousMargin(float(entry["c"]), float(entry["d"])))
        else:
            margins.append(DiscreteMargin(np.array(entry["u"], dtype=float)))
    return CopulaParams(L, margins)


def save_params(params: CopulaParams, path: str | Path, names=None, fit_meta=None) -> None:
    Path(path).write_text(
        json.dumps(params_to_dict(params, names, fit_meta), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_params(path: str | Path) -> CopulaParams:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
