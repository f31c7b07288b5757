"""Knockoff machinery: S-matrix construction, conditional Gaussian knockoff
draws, knockoff sampling under missing data, the likelihood-based statistic,
the PFER-controlling threshold, and derandomised selection by aggregating
selection frequencies across independent knockoff draws.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from ._rng import derive_seed, rng_from
from .copula import CopulaParams, marginal_dummy_cov
from .data import ItemBank, MixedDataset, ResponseData
from .errors import DataError, NumericalError
from .latreg import (
    EmConfig,
    JointModelSampler,
    KnockoffSet,
    RegressionParams,
    fit_latent_regression,
)
from .measurement import pack_student_logliks

_PSD_TOL = 1e-8


@dataclass
class SDiag:
    """Diagonal of the knockoff S matrix; feasibility means 2*Sigma - S >= 0."""

    s: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        if np.any(self.s < 0):
            raise DataError("S diagonal entries must be nonnegative")


def sdiag_feasible(sdiag: SDiag, sigma: np.ndarray, tol: float = _PSD_TOL) -> bool:
    vals = np.linalg.eigvalsh(2.0 * sigma - np.diag(sdiag.s))
    return bool(vals.min() >= -tol)


def joint_cov(sigma: np.ndarray, sdiag: SDiag) -> np.ndarray:
    """The 2p x 2p covariance [[Sigma, Sigma-S], [Sigma-S, Sigma]]."""
    off = sigma - np.diag(sdiag.s)
    return np.block([[sigma, off], [off, sigma]])


def s_equicorrelated(sigma: np.ndarray) -> SDiag:
    """s_j = min(1, 2 lambda_min(Sigma)) for every coordinate."""
    vals = np.linalg.eigvalsh(sigma)
    lam_min = float(vals.min())
    if lam_min < -_PSD_TOL:
        raise NumericalError("Sigma is not positive semidefinite")
    return SDiag(np.full(sigma.shape[0], min(1.0, 2.0 * max(lam_min, 0.0))))


def s_mvr(sigma: np.ndarray, iters: int = 20, tol: float = 1e-6) -> SDiag:
    """Approximately minimise trace(G^-1) over feasible diagonal S.

    Uses the orthogonal split trace(G^-1) = trace((2 Sigma - S)^-1) +
    sum_j 1/s_j and cyclic coordinate descent with a safeguarded 1-D
    minimisation per coordinate (Sherman-Morrison keeps updates cheap).
    The objective never increases across coordinate updates.
    """
    p = sigma.shape[0]
    vals = np.linalg.eigvalsh(sigma)
    lam_min = float(vals.min())
    if lam_min <= 0:
        raise NumericalError("Sigma must be full rank for the MVR construction")
    s = np.full(p, min(1.0, 2.0 * lam_min) * 0.5)

    def objective(s_vec):
        a = 2.0 * sigma - np.diag(s_vec)
        return float(np.trace(np.linalg.inv(a))) + float(np.sum(1.0 / s_vec))

    best = objective(s)
    converged = False
    for _sweep in range(iters):
        a_inv = np.linalg.inv(2.0 * sigma - np.diag(s))
        for j in range(p):
            u = a_inv[:, j]
            ajj = float(a_inv[j, j])
            u_sq = float(u @ u)
            lo = -s[j] * (1.0 - 1e-9)
            hi = (1.0 - 1e-7) / ajj

            def g(delta):
                return delta * u_sq / (1.0 - delta * ajj) + 1.0 / (s[j] + delta)

            res = minimize_scalar(g, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10})
            delta = float(res.x)
            if g(delta) >= g(0.0):
                continue
            denom = 1.0 - delta * ajj
            a_inv = a_inv + np.outer(u, u) * (delta / denom)
            s[j] += delta
        current = objective(s)
        if best - current < tol * max(abs(best), 1.0):
            best = current
            converged = True
            break
        best = current
    if not converged:
        warnings.warn(
            "MVR coordinate descent hit the sweep limit before converging; "
            "returning the best feasible iterate",
            stacklevel=2,
        )
    out = SDiag(s)
    if not sdiag_feasible(out, sigma):
        raise NumericalError("MVR coordinate descent left the feasible set")
    return out


def conditional_knockoff_gaussian(
    zstar: np.ndarray, sigma: np.ndarray, sdiag: SDiag, rng
) -> np.ndarray:
    """Draw Ztilde* | Z* = zstar from the second block of N(0, G):
    N((I - S Sigma^-1) z*, 2S - S Sigma^-1 S).  Accepts a row or a matrix."""
    z = np.atleast_2d(np.asarray(zstar, dtype=float))
    s = sdiag.s
    sigma_inv = np.linalg.inv(sigma)
    mean = z - (z @ sigma_inv) * s
    cond = 2.0 * np.diag(s) - (sigma_inv * np.outer(s, s))
    vals, vecs = np.linalg.eigh(0.5 * (cond + cond.T))
    if vals.min() < -_PSD_TOL:
        raise NumericalError("conditional knockoff covariance is not PSD")
    root = vecs * np.sqrt(np.maximum(vals, 0.0))
    draw = mean + rng.standard_normal(z.shape) @ root.T
    return draw[0] if np.asarray(zstar).ndim == 1 else draw


def sample_knockoffs(
    ds: MixedDataset,
    responses: ResponseData,
    bank: ItemBank,
    copula_params: CopulaParams,
    reg_params: RegressionParams,
    sdiag: SDiag,
    gibbs_sweeps: int = 200,
    seed: int = 0,
    item_logliks=None,
) -> KnockoffSet:
    """Algorithm: run the joint (theta, Z*) Gibbs chain under the plain fitted
    model given (Z_obs, Y), take the final underlying state, draw the
    conditional Gaussian knockoff, transform through the margins, and keep the
    observed pattern only."""
    if reg_params.has_knockoffs:
        raise DataError("knockoff sampling uses the plain model parameters")
    rng = rng_from(seed, 0x6B0)
    lls = item_logliks if item_logliks is not None else pack_student_logliks(responses, bank)
    sampler = JointModelSampler(ds, copula_params, lls, knockoffs=None)
    sampler.set_params(reg_params)
    for _ in range(gibbs_sweeps):
        sampler.draw_thetas(rng)
        sampler.scan(rng)
    sigma = copula_params.sigma()
    ztilde_star = conditional_knockoff_gaussian(sampler.zstar, sigma, sdiag, rng)
    values = np.full_like(ds.values, np.nan)
    for j in range(ds.n_vars):
        obs = ds.observed_mask[:, j]
        values[obs, j] = copula_params.transform(j, ztilde_star[obs, j])
    return KnockoffSet(values, sdiag.s.copy())


@dataclass
class WStats:
    """Knockoff statistics with the fitted-coefficient provenance."""

    w: np.ndarray
    beta_norms: np.ndarray
    gamma_norms: np.ndarray
    block_sizes: np.ndarray


def knockoff_stats(params: RegressionParams, copula_params: CopulaParams) -> WStats:
    """W_j = sign(|b_j| - |g_j|) * max(|b_j|, |g_j|) / sqrt(p_j) with
    standardised block norms |.| through the square root of Cov(g_j(Z_j))."""
    if params.gamma is None:
        raise DataError("knockoff statistics need fitted knockoff coefficients")
    p = len(params.beta)
    w = np.zeros(p)
    nb = np.zeros(p)
    ng = np.zeros(p)
    sizes = np.zeros(p, dtype=int)
    for j in range(p):
        _, root = marginal_dummy_cov(copula_params, j)
        b = root @ params.beta[j]
        g = root @ params.gamma[j]
        nb[j] = float(np.linalg.norm(b))
        ng[j] = float(np.linalg.norm(g))
        sizes[j] = params.beta[j].size
        w[j] = np.sign(nb[j] - ng[j]) * max(nb[j], ng[j]) / math.sqrt(sizes[j])
    return WStats(w, nb, ng, sizes)


@dataclass
class SelectionResult:
    """Threshold, selected set {j : W_j > tau}, and the nominal level."""

    tau: float
    selected: np.ndarray
    nu: int

    @property
    def all_selected(self) -> bool:
        return self.tau == -math.inf


def baseline_threshold(w: np.ndarray | WStats, nu: int) -> SelectionResult:
    """tau = inf{t > 0 : 1 + #{j : W_j < -t} = nu}; -inf when unattainable.

    The infimum is scanned over the candidate set {|W_j| : W_j < 0} plus 0+,
    with ties resolved to the smallest feasible threshold.
    """
    if nu < 1:
        raise DataError("nu must be a positive integer")
    vec = w.w if isinstance(w, WStats) else np.asarray(w, dtype=float)
    neg = np.abs(vec[vec < 0.0])
    tau = -math.inf
    if neg.size == nu - 1:
        tau = 0.0
    else:
        for cand in np.unique(neg):
            if int(np.sum(neg > cand)) == nu - 1:
                tau = float(cand)
                break
    selected = np.flatnonzero(vec > tau)
    return SelectionResult(tau, selected, nu)


def swap_columns(
    z_values: np.ndarray,
    zt_values: np.ndarray,
    subset,
    observed_mask: np.ndarray,
    zt_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exchange original and knockoff entries for columns in ``subset`` on
    observed cells only; everything else is untouched."""
    if zt_mask is not None and not np.array_equal(observed_mask, zt_mask):
        raise DataError("original and knockoff masks are misaligned")
    if z_values.shape != zt_values.shape or z_values.shape != observed_mask.shape:
        raise DataError("original and knockoff matrices are misaligned")
    z2 = z_values.copy()
    zt2 = zt_values.copy()
    for j in set(int(j) for j in subset):
        rows = observed_mask[:, j]
        z2[rows, j], zt2[rows, j] = zt_values[rows, j], z_values[rows, j]
    return z2, zt2


# ---------------------------------------------------------------------------
# Derandomised selection
# ---------------------------------------------------------------------------


@dataclass
class NuSelection:
    """Aggregated result at one nominal PFER level."""

    nu: int
    pi: np.ndarray
    selected: np.ndarray
    per_run: list


@dataclass
class DerandomizedResult:
    by_nu: dict
    w_runs: np.ndarray
    m_runs: int
    eta: float
    base_seed: int
    run_seeds: list

    def selection(self, nu: int) -> NuSelection:
        return self.by_nu[nu]


@dataclass
class KnockoffRunConfig:
    m_runs: int = 31
    eta: float = 0.5
    nu_levels: tuple = (1,)
    gibbs_sweeps: int = 200
    base_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.m_runs < 1:
            raise DataError("M must be >= 1")
        if not (0.0 < self.eta <= 1.0):
            raise DataError("eta must lie in (0, 1]")
        if any(nu < 1 for nu in self.nu_levels):
            raise DataError("every nu must be >= 1")


def _one_run(args):
    (m, ds, responses, bank, copula_params, plain_params, sdiag, em_cfg, run_cfg) = args
    seed_m = derive_seed(run_cfg.base_seed, 0x6B, m)
    knock = sample_knockoffs(
        ds,
        responses,
        bank,
        copula_params,
        plain_params,
        sdiag,
        gibbs_sweeps=run_cfg.gibbs_sweeps,
        seed=seed_m,
    )
    fit = fit_latent_regression(
        responses,
        ds,
        copula_params,
        bank,
        EmConfig(em_cfg.burn_in, em_cfg.iters, derive_seed(seed_m, 0xE1)),
        knockoffs=knock,
    )
    stats = knockoff_stats(fit.params, copula_params)
    sels = {nu: baseline_threshold(stats, nu) for nu in run_cfg.nu_levels}
    return m, seed_m, stats.w, sels


def derandomized_select(
    ds: MixedDataset,
    responses: ResponseData,
    bank: ItemBank,
    copula_params: CopulaParams,
    plain_params: RegressionParams,
    sdiag: SDiag,
    em_cfg: EmConfig,
    run_cfg: KnockoffRunConfig,
) -> DerandomizedResult:
    """M independent knockoff draws and augmented fits; selection frequencies
    Pi_j aggregated per nu with the fixed denominator M.  Any run failure
    aborts with its run index (denominators never shrink)."""
    p = ds.n_vars
    jobs = [
        (m, ds, responses, bank, copula_params, plain_params, sdiag, em_cfg, run_cfg)
        for m in range(1, run_cfg.m_runs + 1)
    ]
    results = []
    if run_cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=run_cfg.threads) as pool:
            futures = [pool.submit(_one_run, job) for job in jobs]
            for m, fut in enumerate(futures, start=1):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise NumericalError(f"derandomised run {m} failed: {exc!r}") from exc
    else:
        for job in jobs:
            try:
                results.append(_one_run(job))
            except Exception as exc:
                raise NumericalError(f"derandomised run {job[0]} failed: {exc!r}") from exc
    results.sort(key=lambda r: r[0])
    w_runs = np.array([r[2] for r in results])
    run_seeds = [r[1] for r in results]
    by_nu = {}
    for nu in run_cfg.nu_levels:
        per_run = [r[3][nu] for r in results]
        counts = np.zeros(p)
        for sel in per_run:
            counts[sel.selected] += 1.0
        pi = counts / run_cfg.m_runs
        selected = np.flatnonzero(pi >= run_cfg.eta)
        by_nu[nu] = NuSelection(nu, pi, selected, per_run)
    return DerandomizedResult(
        by_nu, w_runs, run_cfg.m_runs, run_cfg.eta, run_cfg.base_seed, run_seeds
    )
