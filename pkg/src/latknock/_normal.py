"""Gaussian numerics shared across modules.

Univariate normal helpers, numerically careful interval probabilities,
vectorised truncated-normal sampling, a bivariate-normal CDF (Gauss-Legendre
quadrature of the correlation integral), and the eigenvalue-clipping
projection onto the positive-semidefinite correlation matrices.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
MASS_FLOOR = 1e-300
# standard-normal pdf underflows past |x| ~ 38.6; keep standardized arguments sane
_Z_CLIP = 37.0


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - LOG_SQRT_2PI)


def norm_cdf(x):
    return ndtr(np.asarray(x, dtype=float))


def norm_ppf(q):
    return ndtri(np.asarray(q, dtype=float))


def interval_prob(a, b):
    """P(a < X <= b) for X ~ N(0,1), elementwise, floored at MASS_FLOOR.

    Uses the smaller tail so that intervals far in either tail keep relative
    accuracy instead of cancelling to 0.
    """
    a = np.clip(np.asarray(a, dtype=float), -np.inf, _Z_CLIP)
    b = np.clip(np.asarray(b, dtype=float), -_Z_CLIP, np.inf)
    a, b = np.broadcast_arrays(a, b)
    out = np.where(a + b >= 0.0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return np.maximum(out, MASS_FLOOR)


def trunc_norm_mean(a, b):
    """Mean of N(0,1) truncated to (a, b]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return (norm_pdf(a) - norm_pdf(b)) / interval_prob(a, b)


def sample_trunc_norm(mu, sd, lo, hi, rng, size=None):
    """Draws from N(mu, sd^2) truncated to (lo, hi], all arguments broadcastable.

    Inverse-CDF in double precision; adequate for |standardised bound| up to
    ~8, which the marginal initialisation guarantees.
    """
    mu = np.asarray(mu, dtype=float)
    sd = np.asarray(sd, dtype=float)
    a = np.clip((np.asarray(lo, dtype=float) - mu) / sd, -_Z_CLIP, _Z_CLIP)
    b = np.clip((np.asarray(hi, dtype=float) - mu) / sd, -_Z_CLIP, _Z_CLIP)
    pa = ndtr(a)
    pb = ndtr(b)
    if size is None:
        size = np.broadcast(mu, sd, a, b).shape
    u = rng.uniform(size=size)
    q = pa + u * (pb - pa)
    # keep strictly inside (0, 1) so ndtri stays finite
    tiny = np.finfo(float).tiny
    q = np.clip(q, tiny, 1.0 - 1e-16)
    x = mu + sd * ndtri(q)
    return np.clip(x, np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def bvn_cdf(h, k, rho, n_nodes: int = 48):
    """P(X <= h, Y <= k) for standard bivariate normal with correlation rho.

    Quadrature of dPhi2/drho = phi2(h, k; r) from 0 to rho; exact at rho = 0.
    Elementwise in h and k; rho scalar with |rho| < 1.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    rho = float(rho)
    if abs(rho) >= 1.0 - 1e-12:
        rho = np.sign(rho) * (1.0 - 1e-12)
    base = ndtr(h) * ndtr(k)
    if rho == 0.0:
        return base
    nodes, weights = _gauss_legendre(n_nodes)
    r = 0.5 * rho * (nodes + 1.0)  # map [-1,1] -> [0, rho]
    w = 0.5 * rho * weights
    hh = h[..., None]
    kk = k[..., None]
    hh = np.clip(hh, -_Z_CLIP, _Z_CLIP)
    kk = np.clip(kk, -_Z_CLIP, _Z_CLIP)
    om = 1.0 - r * r
    integrand = np.exp(-(hh * hh - 2.0 * r * hh * kk + kk * kk) / (2.0 * om)) / (
        2.0 * np.pi * np.sqrt(om)
    )
    return base + np.sum(w * integrand, axis=-1)


def bvn_rect_prob(a1, b1, a2, b2, rho, n_nodes: int = 48):
    """P(a1 < X <= b1, a2 < Y <= b2) under standard bivariate normal corr rho."""
    big = 12.0

    def _c(x):
        return np.clip(np.asarray(x, dtype=float), -big, big)

    p = (
        bvn_cdf(_c(b1), _c(b2), rho, n_nodes)
        - bvn_cdf(_c(a1), _c(b2), rho, n_nodes)
        - bvn_cdf(_c(b1), _c(a2), rho, n_nodes)
        + bvn_cdf(_c(a1), _c(a2), rho, n_nodes)
    )
    return np.maximum(p, 0.0)


def nearest_psd_correlation(mat: np.ndarray, eig_floor: float = 0.0) -> np.ndarray:
    """Eigenvalue clipping followed by re-normalising the diagonal to one."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, eig_floor)
    out = (vecs * vals) @ vecs.T
    d = np.sqrt(np.maximum(np.diag(out), 1e-12))
    out = out / np.outer(d, d)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out
