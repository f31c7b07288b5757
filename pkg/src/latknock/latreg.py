"""Structural latent-regression model, plain and knockoff-augmented.

The latent proficiency theta regresses linearly on dummy-coded predictors
(identity for continuous/binary, cumulative indicators for ordinal).  With
knockoffs present the design doubles: theta ~ N(beta0 + sum beta_j g_j(Z_j)
+ sum gamma_j g_j(Ztilde_j), sigma^2).

Fitting is a stochastic EM: each iteration draws theta per student by
adaptive rejection sampling, runs one Gibbs scan over the underlying normals
(missing continuous cells combine the Gaussian prior conditional with the
Gaussian theta-likelihood; missing discrete cells draw a category with
weights exp-residual x prior rectangle mass, then a truncated normal inside;
observed discrete cells draw the truncated prior conditional), and solves a
closed-form weighted least-squares M-step.  The reported estimate averages
the post-burn-in parameter iterates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr as qr_pivot
from scipy.linalg import solve_triangular

from ._normal import interval_prob, norm_cdf, sample_trunc_norm
from ._rng import rng_from
from .copula import ContinuousMargin, CopulaParams, init_underlying
from .data import ItemBank, MixedDataset, ResponseData, VariableMeta
from .errors import DataError, FitDivergenceError, NumericalError, RankDeficiencyError
from .measurement import (
    BatchItemLoglik,
    BatchThetaSampler,
    ItemLoglik,
    draw_theta_given,
    pack_student_logliks,
)

_SIGMA2_FLOOR = 1e-6
_RANK_PATIENCE = 5


def block_sizes(meta: list[VariableMeta]) -> list[int]:
    """p_j per variable: 1 for continuous/binary, K_j for ordinal."""
    return [m.n_thresholds if m.kind == "ordinal" else 1 for m in meta]


@dataclass
class RegressionParams:
    """Intercept, per-variable coefficient blocks, optional knockoff blocks,
    and residual variance."""

    beta0: float
    beta: list
    gamma: list | None
    sigma2: float

    def __post_init__(self):
        self.beta = [np.atleast_1d(np.asarray(b, dtype=float)) for b in self.beta]
        if self.gamma is not None:
            self.gamma = [np.atleast_1d(np.asarray(g, dtype=float)) for g in self.gamma]
            if [g.size for g in self.gamma] != [b.size for b in self.beta]:
                raise DataError("gamma block shapes must match beta blocks")
        if not self.sigma2 > 0:
            raise DataError("sigma2 must be positive")

    @property
    def has_knockoffs(self) -> bool:
        return self.gamma is not None


@dataclass
class EmConfig:
    burn_in: int = 20
    iters: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 1 or self.iters < 1:
            raise DataError("burn_in and iters must both be >= 1")


@dataclass
class JointState:
    """Gibbs state: theta draws plus underlying normals (and knockoff copies)."""

    theta: np.ndarray
    zstar: np.ndarray
    zstar_knock: np.ndarray | None = None


@dataclass
class KnockoffSet:
    """Observed-pattern knockoff values plus the S diagonal defining G."""

    values: np.ndarray
    s: np.ndarray


def design_row(z_complete: np.ndarray, meta: list[VariableMeta]) -> np.ndarray:
    """Regressor vector (leading 1) for one complete row."""
    z_complete = np.asarray(z_complete, dtype=float)
    if np.any(~np.isfinite(z_complete)):
        raise DataError("design_row requires a complete row")
    parts = [np.ones(1)]
    for j, m in enumerate(meta):
        if m.kind == "ordinal":
            k = np.arange(1, m.n_categories)
            parts.append((z_complete[j] >= k).astype(float))
        else:
            parts.append(np.array([z_complete[j]]))
    return np.concatenate(parts)


def design_matrix(values: np.ndarray, meta: list[VariableMeta]) -> np.ndarray:
    """Vectorised design_row (no intercept column)."""
    n = values.shape[0]
    cols = []
    for j, m in enumerate(meta):
        if m.kind == "ordinal":
            k = np.arange(1, m.n_categories)
            cols.append((values[:, j : j + 1] >= k).astype(float))
        else:
            cols.append(values[:, j : j + 1])
    return np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))


def column_labels(meta: list[VariableMeta], knockoffs: bool) -> list[str]:
    labels = ["intercept"]
    for m in meta:
        if m.kind == "ordinal":
            labels += [f"{m.name}>= {k}".replace(" ", "") for k in range(1, m.n_categories)]
        else:
            labels.append(m.name)
    if knockoffs:
        for m in meta:
            if m.kind == "ordinal":
                labels += [f"knock:{m.name}>={k}" for k in range(1, m.n_categories)]
            else:
                labels.append(f"knock:{m.name}")
    return labels


def _diagnose_rank(x: np.ndarray, labels) -> None:
    n, k = x.shape
    _, r, piv = qr_pivot(x, mode="economic", pivoting=True)
    r_diag = np.abs(np.diag(r))
    tol = r_diag.max() * max(n, k) * np.finfo(float).eps if r_diag.size else 0.0
    rank = int(np.sum(r_diag > tol))
    bad = sorted(piv[rank:])
    names = [labels[i] if labels else str(i) for i in bad]
    raise RankDeficiencyError(
        f"design matrix is rank deficient (rank {rank} < {k}); offending columns: "
        + ", ".join(names),
        columns=bad,
    )


def mstep_ols(theta: np.ndarray, designs: np.ndarray, labels=None) -> tuple[np.ndarray, float]:
    """OLS of theta on the design matrix (first column the intercept);
    sigma^2 = RSS / N.  Raises on rank deficiency, naming offending columns.

    Solves the normal equations by Cholesky; a failed or near-singular
    factorisation triggers the pivoted-QR diagnosis."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(designs, dtype=float)
    n, k = x.shape
    xtx = x.T @ x
    try:
        chol = np.linalg.cholesky(xtx)
    except np.linalg.LinAlgError:
        _diagnose_rank(x, labels)
    d = np.diag(chol)
    if d.min() <= d.max() * 1e-7:
        _diagnose_rank(x, labels)
    xty = x.T @ theta
    coef = solve_triangular(chol.T, solve_triangular(chol, xty, lower=True), lower=False)
    resid = theta - x @ coef
    sigma2 = max(float(resid @ resid) / n, _SIGMA2_FLOOR)
    return coef, sigma2


def flatten_params(params: RegressionParams) -> np.ndarray:
    parts = [np.array([params.beta0])] + list(params.beta)
    if params.gamma is not None:
        parts += list(params.gamma)
    return np.concatenate(parts)


def unflatten_params(vec: np.ndarray, sizes: list[int], knockoffs: bool, sigma2: float) -> RegressionParams:
    beta0 = float(vec[0])
    beta = []
    pos = 1
    for s in sizes:
        beta.append(vec[pos : pos + s].copy())
        pos += s
    gamma = None
    if knockoffs:
        gamma = []
        for s in sizes:
            gamma.append(vec[pos : pos + s].copy())
            pos += s
    return RegressionParams(beta0, beta, gamma, sigma2)


# ---------------------------------------------------------------------------
# Joint Gibbs machinery
# ---------------------------------------------------------------------------


class JointModelSampler:
    """Holds the joint (theta, Z*, Ztilde*) Gibbs state and the conditionals
    induced by fixed copula parameters and current regression parameters.

    The parameter snapshot is immutable during a sampling pass; row subsets
    per coordinate are fixed, so scans are vectorised across students.
    """

    def __init__(
        self,
        ds: MixedDataset,
        copula_params: CopulaParams,
        item_logliks: list[ItemLoglik],
        knockoffs: KnockoffSet | None = None,
    ):
        self.ds = ds
        self.cop = copula_params
        self.item_logliks = item_logliks
        self.theta_sampler = BatchThetaSampler(BatchItemLoglik(item_logliks))
        self.meta = ds.meta
        self.n, self.p = ds.values.shape
        self.knock = knockoffs
        sigma = copula_params.sigma()
        if knockoffs is None:
            cov = sigma
        else:
            sig_s = sigma - np.diag(knockoffs.s)
            cov = np.block([[sigma, sig_s], [sig_s, sigma]])
        jitter = 0.0
        for _ in range(6):
            try:
                np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
                break
            except np.linalg.LinAlgError:
                jitter = max(jitter * 10.0, 1e-10)
        self.lam = np.linalg.inv(cov + jitter * np.eye(cov.shape[0]))
        self.cond_sd = 1.0 / np.sqrt(np.diag(self.lam))
        # fixed row subsets per coordinate
        obs = ds.observed_mask
        self.rows_missing = [np.flatnonzero(~obs[:, j]) for j in range(self.p)]
        self.rows_obs_disc = [
            np.flatnonzero(obs[:, j]) if copula_params.is_discrete(j) else np.array([], dtype=int)
            for j in range(self.p)
        ]
        # state
        self.zstar = init_underlying(ds.values, obs, copula_params)
        self.zvals = ds.values.copy()
        for j in range(self.p):
            rows = self.rows_missing[j]
            if rows.size:
                self.zvals[rows, j] = copula_params.transform(j, self.zstar[rows, j])
        if knockoffs is not None:
            self.kstar = init_underlying(knockoffs.values, obs, copula_params)
            self.kvals = knockoffs.values.copy()
            for j in range(self.p):
                rows = self.rows_missing[j]
                if rows.size:
                    self.kvals[rows, j] = copula_params.transform(j, self.kstar[rows, j])
        else:
            self.kstar = None
            self.kvals = None
        self.theta = np.zeros(self.n)
        # parameter-dependent fields, set by set_params
        self.beta0 = 0.0
        self.sigma2 = 1.0
        self.cum_beta: list[np.ndarray] = []
        self.cum_gamma: list[np.ndarray] = []
        self.linpred = np.zeros(self.n)

    # -- parameters ---------------------------------------------------------

    def set_params(self, params: RegressionParams) -> None:
        if (params.gamma is not None) != (self.knock is not None):
            raise DataError("knockoff blocks must match the sampler construction")
        sizes = [b.size for b in params.beta]
        if sizes != block_sizes(self.meta):
            raise DataError(
                f"coefficient block sizes {sizes} do not match the metadata "
                f"{block_sizes(self.meta)}"
            )
        self.beta0 = params.beta0
        self.sigma2 = params.sigma2
        self.cum_beta = [self._cum(j, b) for j, b in enumerate(params.beta)]
        if params.gamma is not None:
            self.cum_gamma = [self._cum(j, g) for j, g in enumerate(params.gamma)]
        self._rebuild_linpred()

    def _cum(self, j: int, block: np.ndarray) -> np.ndarray:
        """Per-category contribution for discrete j, or the scalar slope."""
        if self.meta[j].kind == "continuous":
            return block  # scalar slope
        return np.concatenate(([0.0], np.cumsum(block)))

    def _contrib(self, j: int, vals: np.ndarray, cum: np.ndarray) -> np.ndarray:
        if self.meta[j].kind == "continuous":
            return cum[0] * vals
        return cum[vals.astype(int)]

    def _rebuild_linpred(self) -> None:
        lin = np.full(self.n, self.beta0)
        for j in range(self.p):
            lin += self._contrib(j, self.zvals[:, j], self.cum_beta[j])
            if self.knock is not None:
                lin += self._contrib(j, self.kvals[:, j], self.cum_gamma[j])
        self.linpred = lin

    # -- sampling -----------------------------------------------------------

    def draw_thetas(self, rng) -> None:
        self.theta = self.theta_sampler.draw(self.linpred, self.sigma2, rng)

    def _state_col(self, j: int, knock: bool) -> int:
        return j + self.p if knock else j

    def _cond_moments(self, rows: np.ndarray, col: int) -> tuple[np.ndarray, float]:
        if self.knock is None:
            state = self.zstar
            w = state[rows] @ self.lam[: self.p, col]
        else:
            w = self.zstar[rows] @ self.lam[: self.p, col] + self.kstar[rows] @ self.lam[self.p :, col]
        cur = (self.kstar if col >= self.p else self.zstar)[rows, col % self.p]
        lam_jj = self.lam[col, col]
        if lam_jj <= 0:
            raise NumericalError(f"state coordinate {col}: non-positive conditional precision")
        return cur - w / lam_jj, self.cond_sd[col]

    def _update_cell(self, j: int, knock: bool, rows: np.ndarray, new_star, new_vals=None) -> None:
        star = self.kstar if knock else self.zstar
        vals = self.kvals if knock else self.zvals
        star[rows, j] = new_star
        if new_vals is not None:
            cum = self.cum_gamma[j] if knock else self.cum_beta[j]
            old = self._contrib(j, vals[rows, j], cum)
            vals[rows, j] = new_vals
            self.linpred[rows] += self._contrib(j, new_vals, cum) - old

    def _scan_coordinate(self, j: int, knock: bool, rng) -> None:
        meta = self.meta[j]
        cum = (self.cum_gamma if knock else self.cum_beta)[j]
        col = self._state_col(j, knock)
        margin = self.cop.margins[j]
        # missing cells: theta-likelihood times the prior conditional
        rows = self.rows_missing[j]
        if rows.size:
            mu_c, s_c = self._cond_moments(rows, col)
            resid = self.theta[rows] - (
                self.linpred[rows]
                - self._contrib(j, (self.kvals if knock else self.zvals)[rows, j], cum)
            )
            if meta.kind == "continuous":
                slope = cum[0] * margin.d
                prec = 1.0 / (s_c * s_c) + slope * slope / self.sigma2
                mean = (
                    mu_c / (s_c * s_c) + slope * (resid - cum[0] * margin.c) / self.sigma2
                ) / prec
                draw = mean + rng.standard_normal(rows.size) / math.sqrt(prec)
                self._update_cell(j, knock, rows, draw, margin.c + margin.d * draw)
            else:
                edges = np.concatenate(([-np.inf], margin.thresholds, [np.inf]))
                a = (edges[:-1][None, :] - mu_c[:, None]) / s_c
                b = (edges[1:][None, :] - mu_c[:, None]) / s_c
                mass = interval_prob(a, b)
                expo = -0.5 * (cum[None, :] - resid[:, None]) ** 2 / self.sigma2
                expo -= expo.max(axis=1, keepdims=True)
                w = np.exp(expo) * mass
                cdf = np.cumsum(w, axis=1)
                u = rng.uniform(size=rows.size) * cdf[:, -1]
                codes = (u[:, None] > cdf).sum(axis=1)
                draw = sample_trunc_norm(mu_c, s_c, edges[codes], edges[codes + 1], rng)
                self._update_cell(j, knock, rows, draw, codes.astype(float))
        # observed discrete cells: truncated prior conditional, category fixed
        rows = self.rows_obs_disc[j]
        if rows.size:
            mu_c, s_c = self._cond_moments(rows, col)
            codes = (self.kvals if knock else self.zvals)[rows, j].astype(int)
            lo, hi = self.cop.rectangle(j, codes)
            draw = sample_trunc_norm(mu_c, s_c, lo, hi, rng)
            self._update_cell(j, knock, rows, draw)

    def scan(self, rng) -> None:
        """One systematic scan over every underlying coordinate."""
        for j in range(self.p):
            self._scan_coordinate(j, False, rng)
        if self.knock is not None:
            for j in range(self.p):
                self._scan_coordinate(j, True, rng)

    def design(self) -> np.ndarray:
        cols = [np.ones((self.n, 1)), design_matrix(self.zvals, self.meta)]
        if self.knock is not None:
            cols.append(design_matrix(self.kvals, self.meta))
        return np.concatenate(cols, axis=1)

    def state(self) -> JointState:
        return JointState(
            self.theta.copy(),
            self.zstar.copy(),
            None if self.kstar is None else self.kstar.copy(),
        )


def gibbs_sweep_joint(
    row_index: int,
    ds: MixedDataset,
    responses: ResponseData,
    bank: ItemBank,
    params: RegressionParams,
    copula_params: CopulaParams,
    state: JointState,
    rng,
    knockoffs: KnockoffSet | None = None,
) -> JointState:
    """One theta draw plus one underlying-coordinate scan for a single row."""
    sub_ds = MixedDataset(
        ds.values[row_index : row_index + 1],
        ds.observed_mask[row_index : row_index + 1],
        ds.meta,
    )
    sub_knock = None
    if knockoffs is not None:
        sub_knock = KnockoffSet(knockoffs.values[row_index : row_index + 1], knockoffs.s)
    lls = pack_student_logliks(responses, bank)
    sampler = JointModelSampler(sub_ds, copula_params, [lls[row_index]], sub_knock)
    sampler.zstar[0] = state.zstar[row_index]
    if sub_knock is not None:
        sampler.kstar[0] = state.zstar_knock[row_index]
        for j in range(sampler.p):
            if not ds.observed_mask[row_index, j]:
                sampler.kvals[0, j] = copula_params.transform(j, sampler.kstar[0, j])
    for j in range(sampler.p):
        if not ds.observed_mask[row_index, j]:
            sampler.zvals[0, j] = copula_params.transform(j, sampler.zstar[0, j])
    sampler.theta[0] = state.theta[row_index]
    sampler.set_params(params)
    sampler.draw_thetas(rng)
    sampler.scan(rng)
    state.theta[row_index] = sampler.theta[0]
    state.zstar[row_index] = sampler.zstar[0]
    if sub_knock is not None:
        state.zstar_knock[row_index] = sampler.kstar[0]
    return state


# ---------------------------------------------------------------------------
# Stochastic EM
# ---------------------------------------------------------------------------


@dataclass
class LatregFitResult:
    params: RegressionParams
    iterate_trace: np.ndarray
    config: EmConfig


def fit_latent_regression(
    responses: ResponseData,
    ds: MixedDataset,
    copula_params: CopulaParams,
    bank: ItemBank,
    cfg: EmConfig,
    knockoffs: KnockoffSet | None = None,
) -> LatregFitResult:
    """Stochastic EM estimate of the (possibly knockoff-augmented) structural
    model; the returned parameters average the post-burn-in iterates."""
    if ds.n_rows == 0:
        raise DataError("empty dataset")
    if responses.n_rows != ds.n_rows:
        raise DataError("responses and predictors disagree on N")
    if knockoffs is not None and knockoffs.values.shape != ds.values.shape:
        raise DataError("knockoff values must align with the predictor matrix")
    rng = rng_from(cfg.seed, 0x1A7)
    lls = pack_student_logliks(responses, bank)
    sampler = JointModelSampler(ds, copula_params, lls, knockoffs)
    sizes = block_sizes(ds.meta)
    has_k = knockoffs is not None
    labels = column_labels(ds.meta, has_k)
    zero = unflatten_params(
        np.zeros(1 + sum(sizes) * (2 if has_k else 1)), sizes, has_k, 1.0
    )
    sampler.set_params(zero)

    total = cfg.burn_in + cfg.iters
    n_coef = 1 + sum(sizes) * (2 if has_k else 1)
    trace = np.zeros((total, n_coef + 1))
    acc = np.zeros(n_coef)
    acc_sigma2 = 0.0
    n_avg = 0
    rank_failures = 0
    for t in range(1, total + 1):
        sampler.draw_thetas(rng)
        sampler.scan(rng)
        try:
            coef, sigma2 = mstep_ols(sampler.theta, sampler.design(), labels)
            rank_failures = 0
        except RankDeficiencyError:
            rank_failures += 1
            if rank_failures >= _RANK_PATIENCE:
                raise
            if t > 1:
                trace[t - 1] = trace[t - 2]
            continue
        if not (np.all(np.isfinite(coef)) and math.isfinite(sigma2)):
            raise FitDivergenceError(
                f"stochastic EM diverged at iteration {t}: non-finite parameters",
                diagnostics={"iterate_trace": trace[: t - 1]},
            )
        params_t = unflatten_params(coef, sizes, has_k, sigma2)
        sampler.set_params(params_t)
        trace[t - 1, :n_coef] = coef
        trace[t - 1, n_coef] = sigma2
        if t > cfg.burn_in:
            acc += coef
            acc_sigma2 += sigma2
            n_avg += 1
    if n_avg == 0:
        raise NumericalError("no post-burn-in iterations succeeded")
    final = unflatten_params(acc / n_avg, sizes, has_k, max(acc_sigma2 / n_avg, _SIGMA2_FLOOR))
    return LatregFitResult(final, trace, cfg)


def bootstrap_se(
    fit_fn,
    ds: MixedDataset,
    responses: ResponseData,
    n_boot: int = 200,
    seed: int = 0,
) -> dict:
    """Non-parametric bootstrap over student rows.

    ``fit_fn(ds_b, responses_b, seed_b) -> RegressionParams`` refits the plain
    model on a resample.  Returns per-coefficient standard deviations across
    successful replicates; individual failures are recorded and skipped, but
    more than 10% failures aborts.
    """
    if n_boot < 2:
        raise DataError("bootstrap needs at least 2 replications")
    n = ds.n_rows
    draws = []
    failures = []
    for b in range(n_boot):
        rng = rng_from(seed, 0xB00, b)
        idx = rng.integers(0, n, size=n)
        ds_b = MixedDataset(ds.values[idx], ds.observed_mask[idx], ds.meta)
        resp_b = ResponseData(responses.codes[idx], responses.administered_mask[idx])
        try:
            params_b = fit_fn(ds_b, resp_b, int(rng_from(seed, 0xB01, b).integers(0, 2**31)))
            draws.append(flatten_params(params_b))
        except Exception as exc:  # noqa: BLE001 - replicate failures are data, not bugs
            failures.append((b, repr(exc)))
    if len(draws) < 0.9 * n_boot:
        raise NumericalError(
            f"bootstrap: only {len(draws)}/{n_boot} replicates succeeded"
        )
    mat = np.array(draws)
    return {
        "se": mat.std(axis=0, ddof=1),
        "draws": mat,
        "n_success": len(draws),
        "failures": failures,
    }
