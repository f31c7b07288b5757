"""Shared builders and quadrature oracles for the test suite."""

import numpy as np
import pytest

from latknock import (
    ContinuousMargin,
    CopulaParams,
    DiscreteMargin,
    Item,
    ItemBank,
    MixedDataset,
    ResponseData,
    VariableMeta,
)
from latknock._rng import rng_from


def make_correlation(p, rho):
    sig = np.full((p, p), rho)
    np.fill_diagonal(sig, 1.0)
    return sig


def gaussian_copula_dataset(
    n,
    sigma,
    margins,
    meta,
    rng,
    missing_rate=0.0,
):
    """Draw a MixedDataset from a known copula, optionally MCAR-masked."""
    p = sigma.shape[0]
    chol = np.linalg.cholesky(sigma)
    zstar = rng.standard_normal((n, p)) @ chol.T
    params = CopulaParams(chol, margins)
    values = np.empty_like(zstar)
    for j in range(p):
        values[:, j] = params.transform(j, zstar[:, j])
    if missing_rate > 0:
        mask = rng.uniform(size=(n, p)) > missing_rate
        mask[~mask.any(axis=1)] = True
    else:
        mask = np.ones((n, p), dtype=bool)
    return MixedDataset(values, mask, meta), params, zstar


def quadrature_moments(logpdf, lo=-12.0, hi=12.0, n=20001):
    """Mean and variance of exp(logpdf) on a fine grid (trapezoid)."""
    t = np.linspace(lo, hi, n)
    w = np.exp([logpdf(x) for x in t])
    z = np.trapezoid(w, t)
    mean = np.trapezoid(t * w, t) / z
    var = np.trapezoid(t * t * w, t) / z - mean * mean
    return mean, var


def two_pl_bank(j_items, rng, a_range=(0.5, 1.5), b_range=(-2.0, 0.0)):
    return ItemBank(
        [
            Item(
                f"it{j:03d}",
                "2PL",
                float(rng.uniform(*a_range)),
                (float(rng.uniform(*b_range)),),
            )
            for j in range(j_items)
        ]
    )


def empty_responses(n):
    """ResponseData with zero items (the measurement part switched off)."""
    return ResponseData(np.zeros((n, 0), dtype=int), np.zeros((n, 0), dtype=bool)), ItemBank(
        []
    )


@pytest.fixture
def rng():
    return rng_from(20260810)
