import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from latknock import (
    ContinuousMargin,
    CopulaParams,
    DataError,
    DiscreteMargin,
    EmConfig,
    KnockoffRunConfig,
    MixedDataset,
    RegressionParams,
    SDiag,
    VariableMeta,
    baseline_threshold,
    conditional_knockoff_gaussian,
    derandomized_select,
    joint_cov,
    knockoff_stats,
    s_equicorrelated,
    s_mvr,
    sample_knockoffs,
    swap_columns,
)
from latknock.knockoff import sdiag_feasible
from latknock.measurement import simulate_responses
from latknock._rng import rng_from

from conftest import empty_responses, gaussian_copula_dataset, make_correlation, two_pl_bank


# ---------------------------------------------------------------------------
# S construction
# ---------------------------------------------------------------------------


def test_equicorrelated_examples():
    assert np.allclose(s_equicorrelated(np.eye(3)).s, 1.0)
    assert np.allclose(s_equicorrelated(make_correlation(2, 0.5)).s, 1.0)
    assert np.allclose(s_equicorrelated(make_correlation(2, 0.9)).s, 0.2)


def _trace_g_inv(s, sigma):
    try:
        a = 2 * sigma - np.diag(np.asarray(s, dtype=float))
        if np.linalg.eigvalsh(a).min() <= 0:
            return np.inf
        return float(np.trace(np.linalg.inv(a)) + np.sum(1.0 / np.asarray(s, dtype=float)))
    except np.linalg.LinAlgError:
        return np.inf


def test_mvr_identity_objective():
    out = s_mvr(np.eye(4))
    assert np.allclose(out.s, 1.0, atol=1e-6)
    # 1-D grid search oracle over the common scalar s
    grid = np.linspace(0.01, 1.99, 1000)
    vals = [_trace_g_inv([g] * 4, np.eye(4)) for g in grid]
    assert _trace_g_inv(out.s, np.eye(4)) <= min(vals) + 1e-9
    assert abs(_trace_g_inv(out.s, np.eye(4)) - 8.0) <= 1e-8  # 2p


def test_mvr_grid_oracle_p2():
    sigma = make_correlation(2, 0.5)
    out = s_mvr(sigma)
    grid = np.linspace(1e-3, 1.7, 401)
    best = min(_trace_g_inv([s1, s2], sigma) for s1 in grid for s2 in grid)
    assert _trace_g_inv(out.s, sigma) <= best + 1e-3


def test_mvr_feasibility_random(rng):
    for _ in range(10):
        p = int(rng.integers(2, 8))
        a = rng.standard_normal((p, p))
        sig = a @ a.T + 0.5 * np.eye(p)
        d = np.sqrt(np.diag(sig))
        sig = sig / np.outer(d, d)
        out = s_mvr(sig)
        assert np.all(out.s >= 0)
        assert np.linalg.eigvalsh(2 * sig - np.diag(out.s)).min() >= -1e-8
        g = joint_cov(sig, out)
        assert np.linalg.eigvalsh(g).min() >= -1e-8


# ---------------------------------------------------------------------------
# conditional Gaussian knockoffs
# ---------------------------------------------------------------------------


def test_conditional_knockoff_independence_identity(rng):
    sig = np.eye(2)
    z = rng.standard_normal((50000, 2))
    zt = conditional_knockoff_gaussian(z, sig, SDiag(np.ones(2)), rng)
    assert abs(np.corrcoef(z[:, 0], zt[:, 0])[0, 1]) <= 0.02
    assert abs(zt.std(axis=0) - 1.0).max() <= 0.02


def test_conditional_knockoff_copy_at_zero_s(rng):
    sig = make_correlation(3, 0.4)
    z = rng.standard_normal((100, 3))
    zt = conditional_knockoff_gaussian(z, sig, SDiag(np.zeros(3)), rng)
    assert np.array_equal(zt, z)


def test_conditional_knockoff_moment_check(rng):
    sig = make_correlation(2, 0.5)
    sd = SDiag(np.ones(2))
    z = rng.multivariate_normal(np.zeros(2), sig, size=100000)
    zt = conditional_knockoff_gaussian(z, sig, sd, rng)
    emp = np.cov(np.hstack([z, zt]).T)
    assert np.max(np.abs(emp - joint_cov(sig, sd))) <= 0.02


# ---------------------------------------------------------------------------
# W statistics and threshold
# ---------------------------------------------------------------------------


def _cop_two_vars():
    return CopulaParams(
        np.linalg.cholesky(make_correlation(2, 0.3)),
        [ContinuousMargin(0.0, 1.0), DiscreteMargin(np.array([0.0, 0.0]))],
    )


def test_knockoff_stats_scalar_case():
    cop = CopulaParams(np.eye(1), [ContinuousMargin(0.0, 1.0)])
    params = RegressionParams(0.0, [np.array([0.4])], [np.array([0.1])], 1.0)
    st_ = knockoff_stats(params, cop)
    assert abs(st_.w[0] - 0.4) <= 1e-12


def test_knockoff_stats_tie_gives_zero():
    cop = CopulaParams(np.eye(1), [ContinuousMargin(0.0, 1.0)])
    params = RegressionParams(0.0, [np.array([0.3])], [np.array([-0.3])], 1.0)
    st_ = knockoff_stats(params, cop)
    assert st_.w[0] == 0.0


def test_knockoff_stats_ordinal_norm():
    # block of size 2: W = sign * max norm / sqrt(2) with standardised norms
    cop = _cop_two_vars()
    beta = [np.array([0.0]), np.array([0.3, 0.4])]
    gamma = [np.array([0.0]), np.array([0.0, 0.0])]
    params = RegressionParams(0.0, beta, gamma, 1.0)
    st_ = knockoff_stats(params, cop)
    from latknock import marginal_dummy_cov

    _, root = marginal_dummy_cov(cop, 1)
    expected = np.linalg.norm(root @ beta[1]) / math.sqrt(2)
    assert abs(st_.w[1] - expected) <= 1e-12
    # with identity standardiser the numbers reduce to the plain norms
    assert abs(np.linalg.norm([0.3, 0.4]) / math.sqrt(2) - 0.5 / math.sqrt(2)) <= 1e-12


def test_flip_sign_exact():
    cop = _cop_two_vars()
    rng = rng_from(8)
    beta = [rng.standard_normal(1), rng.standard_normal(2)]
    gamma = [rng.standard_normal(1), rng.standard_normal(2)]
    base = knockoff_stats(RegressionParams(0.1, beta, gamma, 1.0), cop)
    for subset in ([0], [1], [0, 1]):
        b2 = [g if j in subset else b for j, (b, g) in enumerate(zip(beta, gamma))]
        g2 = [b if j in subset else g for j, (b, g) in enumerate(zip(beta, gamma))]
        flipped = knockoff_stats(RegressionParams(0.1, b2, g2, 1.0), cop)
        for j in range(2):
            if j in subset:
                assert flipped.w[j] == -base.w[j]
            else:
                assert flipped.w[j] == base.w[j]


def test_baseline_threshold_examples():
    w = np.array([3.0, 2.0, -1.0, -2.0])
    r1 = baseline_threshold(w, 1)
    assert r1.tau == 2.0 and list(r1.selected) == [0]
    r2 = baseline_threshold(w, 2)
    assert r2.tau == 1.0 and list(r2.selected) == [0, 1]
    r3 = baseline_threshold(np.array([0.5, 0.2, 0.1]), 1)
    assert r3.tau == 0.0 and list(r3.selected) == [0, 1, 2]


def _brute_force_tau(w, nu):
    # exhaustive evaluation of the infimum over a dense candidate grid
    neg = np.abs(w[w < 0])
    cands = np.unique(np.concatenate([[1e-12], neg, neg - 1e-9, neg + 1e-9,
                                      np.linspace(1e-9, np.abs(w).max() + 1.0, 2000)]))
    cands = cands[cands > 0]
    feasible = [t for t in cands if 1 + np.sum(w < -t) == nu]
    if not feasible:
        return -math.inf
    t = min(feasible)
    return 0.0 if t <= 1e-8 else t


def test_threshold_brute_force_equivalence(rng):
    for _ in range(1000):
        p = int(rng.integers(1, 13))
        w = np.round(rng.standard_normal(p), 3)  # rounding forces ties sometimes
        nu = int(rng.integers(1, 6))
        fast = baseline_threshold(w, nu)
        brute = _brute_force_tau(w, nu)
        if math.isinf(brute):
            assert fast.tau == -math.inf
        else:
            assert abs(fast.tau - brute) <= 1e-6
        if fast.tau > -math.inf:
            assert np.sum(w < -fast.tau) <= nu - 1


# ---------------------------------------------------------------------------
# swap utility
# ---------------------------------------------------------------------------


def test_swap_identity_and_involution(rng):
    z = rng.standard_normal((10, 3))
    zt = rng.standard_normal((10, 3))
    mask = rng.uniform(size=(10, 3)) > 0.3
    s0, st0 = swap_columns(z, zt, [], mask)
    assert np.array_equal(s0, z) and np.array_equal(st0, zt)
    s1, st1 = swap_columns(z, zt, [0, 2], mask)
    s2, st2 = swap_columns(s1, st1, [0, 2], mask)
    assert np.array_equal(s2, z) and np.array_equal(st2, zt)


def test_swap_worked_example():
    # p = 3, swap {1, 3} in 1-based labels: columns 0 and 2
    z = np.array([[1.0, 2.0, 3.0]])
    zt = np.array([[10.0, 20.0, 30.0]])
    mask = np.ones((1, 3), bool)
    s, st_ = swap_columns(z, zt, [0, 2], mask)
    assert np.array_equal(s, [[10.0, 2.0, 30.0]])
    assert np.array_equal(st_, [[1.0, 20.0, 3.0]])


def test_swap_respects_mask_and_alignment(rng):
    z = rng.standard_normal((4, 2))
    zt = rng.standard_normal((4, 2))
    mask = np.array([[True, False]] * 4)
    s, st_ = swap_columns(z, zt, [1], mask)
    assert np.array_equal(s[:, 1], z[:, 1])  # unobserved cells untouched
    with pytest.raises(DataError):
        swap_columns(z, zt, [0], mask, zt_mask=~mask)


# ---------------------------------------------------------------------------
# sampling knockoffs and derandomisation
# ---------------------------------------------------------------------------


def _plain_for(meta):
    from latknock.latreg import block_sizes

    return RegressionParams(0.0, [np.zeros(s) for s in block_sizes(meta)], None, 1.0)


def test_sample_knockoffs_zero_s_copies(rng):
    meta = [VariableMeta("c", "continuous"), VariableMeta("b", "binary", 2)]
    margins = [ContinuousMargin(0.3, 1.2), DiscreteMargin(np.array([0.2]))]
    ds, cop, _ = gaussian_copula_dataset(300, make_correlation(2, 0.5), margins, meta, rng)
    resp, bank = empty_responses(300)
    knock = sample_knockoffs(ds, resp, bank, cop, _plain_for(meta), SDiag(np.zeros(2)),
                             gibbs_sweeps=3, seed=1)
    assert np.allclose(knock.values[:, 0], ds.values[:, 0])
    assert np.array_equal(knock.values[:, 1], ds.values[:, 1])


def test_sample_knockoffs_exchangeability_moments(rng):
    # no missingness, continuous design: (Z*, Ztilde*) second moments match G
    p = 3
    sig = make_correlation(p, 0.5)
    meta = [VariableMeta(f"x{j}", "continuous") for j in range(p)]
    margins = [ContinuousMargin(0.0, 1.0)] * p
    n = 100000
    ds, cop, zstar = gaussian_copula_dataset(n, sig, margins, meta, rng)
    resp, bank = empty_responses(n)
    sd = s_mvr(sig)
    knock = sample_knockoffs(ds, resp, bank, cop, _plain_for(meta), sd, gibbs_sweeps=1, seed=3)
    emp = np.cov(np.hstack([ds.values, knock.values]).T)
    g = joint_cov(sig, sd)
    se = 3.0 * (1.0 + np.abs(g)) / math.sqrt(n)
    assert np.all(np.abs(emp - g) <= se)


def test_sample_knockoffs_marginal_frequencies(rng):
    # discrete knockoff marginals match the originals (exchangeability)
    meta = [VariableMeta("b1", "binary", 2), VariableMeta("o1", "ordinal", 3),
            VariableMeta("c1", "continuous")]
    margins = [DiscreteMargin(np.array([-0.4])),
               DiscreteMargin(np.array([-0.5, math.log(1.0)])),
               ContinuousMargin(0.0, 1.0)]
    n = 20000
    ds, cop, _ = gaussian_copula_dataset(n, make_correlation(3, 0.4), margins, meta, rng)
    resp, bank = empty_responses(n)
    sd = s_mvr(make_correlation(3, 0.4))
    knock = sample_knockoffs(ds, resp, bank, cop, _plain_for(meta), sd, gibbs_sweeps=5, seed=9)
    for j, m in enumerate(meta):
        if m.kind == "continuous":
            continue
        k = m.n_categories
        orig = np.bincount(ds.values[:, j].astype(int), minlength=k)
        new = np.bincount(knock.values[:, j].astype(int), minlength=k)
        table = np.vstack([orig, new])
        assert chi2_contingency(table).pvalue > 0.001


def _tiny_study(rng, n=300):
    from latknock.simstudy import desk_preset, generate_study
    from latknock.copula import fit_copula, FitConfig, regularize_spectrum
    from latknock.latreg import fit_latent_regression

    cfg = desk_preset(n=n, seed=31)
    ds, resp, truth = generate_study(cfg, 0)
    fc = fit_copula(ds, cfg=FitConfig(10, 20, seed=1))
    cop = regularize_spectrum(fc.params)
    plain = fit_latent_regression(resp, ds, cop, truth.bank, EmConfig(4, 8, seed=2))
    sd = s_mvr(cop.sigma())
    return ds, resp, truth.bank, cop, plain.params, sd


def test_derandomized_nesting_and_determinism(rng):
    ds, resp, bank, cop, plain_params, sd = _tiny_study(rng)
    run_cfg = KnockoffRunConfig(m_runs=5, eta=0.5, nu_levels=(1, 2, 3),
                                gibbs_sweeps=10, base_seed=77)
    em = EmConfig(3, 6, seed=0)
    res = derandomized_select(ds, resp, bank, cop, plain_params, sd, em, run_cfg)
    # per-run nesting and aggregate nesting
    for m in range(5):
        s1 = set(res.selection(1).per_run[m].selected)
        s2 = set(res.selection(2).per_run[m].selected)
        s3 = set(res.selection(3).per_run[m].selected)
        assert s1 <= s2 <= s3
    assert set(res.selection(1).selected) <= set(res.selection(2).selected)
    assert set(res.selection(2).selected) <= set(res.selection(3).selected)
    # denominators are exactly M
    for nu in (1, 2, 3):
        pi = res.selection(nu).pi
        assert np.allclose(pi * 5, np.round(pi * 5))
    # determinism
    res2 = derandomized_select(ds, resp, bank, cop, plain_params, sd, em, run_cfg)
    assert np.array_equal(res.w_runs, res2.w_runs)
    for nu in (1, 2, 3):
        assert np.array_equal(res.selection(nu).pi, res2.selection(nu).pi)
        assert np.array_equal(res.selection(nu).selected, res2.selection(nu).selected)


def test_derandomized_m1_reduces_to_baseline(rng):
    ds, resp, bank, cop, plain_params, sd = _tiny_study(rng, n=250)
    run_cfg = KnockoffRunConfig(m_runs=1, eta=0.5, nu_levels=(1,), gibbs_sweeps=8, base_seed=3)
    res = derandomized_select(ds, resp, bank, cop, plain_params, sd, EmConfig(3, 5, seed=0), run_cfg)
    run_sel = res.selection(1).per_run[0]
    baseline = baseline_threshold(res.w_runs[0], 1)
    assert np.array_equal(run_sel.selected, baseline.selected)
    assert np.array_equal(res.selection(1).selected, baseline.selected)


def test_sdiag_validation():
    with pytest.raises(DataError):
        SDiag(np.array([-0.1, 0.2]))
    assert sdiag_feasible(SDiag(np.array([1.0, 1.0])), make_correlation(2, 0.5))
    assert not sdiag_feasible(SDiag(np.array([1.9, 1.9])), make_correlation(2, 0.9))
