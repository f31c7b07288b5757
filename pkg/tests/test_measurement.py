import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from latknock import (
    DataError,
    Item,
    ItemBank,
    ResponseData,
    ThetaPosteriorSpec,
    log_measurement_likelihood,
    prob_2pl,
    prob_gpcm,
    sample_theta,
    simulate_responses,
)
from latknock.measurement import (
    BatchItemLoglik,
    BatchThetaSampler,
    ItemLoglik,
    pack_student_logliks,
)
from latknock._rng import rng_from

from conftest import two_pl_bank


def test_prob_2pl_values():
    assert prob_2pl(0.0, 1.0, 0.0) == 0.5
    assert abs(prob_2pl(1.0, 1.0, 0.0) - 0.7310585786300049) < 1e-12
    assert prob_2pl(-50.0, 2.0, 0.0) >= 0.0
    assert math.isfinite(prob_2pl(-50.0, 2.0, 0.0))
    assert prob_2pl(50.0, 14.0, 0.0) == 1.0


def test_prob_gpcm_reduces_to_2pl():
    for theta in (-1.3, 0.0, 0.7):
        probs = prob_gpcm(theta, 1.2, [0.4])
        assert abs(probs[1] - prob_2pl(theta, 1.2, 0.4)) < 1e-12


def test_prob_gpcm_equal_numerators():
    probs = prob_gpcm(0.0, 1.0, [0.0, 0.0])
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(-6, 6),
    st.floats(0.1, 3.0),
    st.lists(st.floats(-3, 3), min_size=1, max_size=6),
)
def test_prob_gpcm_simplex(theta, a, b):
    probs = prob_gpcm(theta, a, b)
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1.0) <= 1e-12


def test_gpcm_simplex_bulk(rng):
    worst = 0.0
    for _ in range(2000):
        theta = rng.uniform(-6, 6)
        a = rng.uniform(0.2, 2.5)
        b = rng.uniform(-2, 2, size=rng.integers(1, 6))
        worst = max(worst, abs(prob_gpcm(theta, a, b).sum() - 1.0))
    assert worst <= 1e-10


def test_log_measurement_likelihood():
    bank = ItemBank([
        Item("a", "2PL", 1.0, (0.0,)),
        Item("b", "2PL", 0.7, (-0.4,)),
    ])
    assert log_measurement_likelihood([0, 0], [False, False], 0.3, bank) == 0.0
    one = log_measurement_likelihood([1, 0], [True, False], 0.0, bank)
    assert abs(one - math.log(0.5)) < 1e-14
    both = log_measurement_likelihood([1, 1], [True, True], 0.4, bank)
    l1 = log_measurement_likelihood([1, 0], [True, False], 0.4, bank)
    l2 = log_measurement_likelihood([0, 1], [False, True], 0.4, bank)
    assert abs(both - (l1 + l2)) < 1e-15
    with pytest.raises(DataError):
        log_measurement_likelihood([3, 0], [True, False], 0.0, bank)


def test_simulate_responses_block_design(rng):
    bank = two_pl_bank(60, rng)
    thetas = rng.standard_normal(500)
    resp = simulate_responses(thetas, bank, 3, rng)
    per_student = resp.administered_mask.sum(axis=1)
    assert np.all(per_student == 20)
    with pytest.raises(DataError):
        simulate_responses(thetas, bank, 7, rng)


def test_simulate_responses_flat_item(rng):
    # a=0: responses ignore theta; empirical rate matches logistic(b)
    bank = ItemBank([Item("flat", "2PL", 0.0, (-0.6,))])
    thetas = rng.standard_normal(10000)
    resp = simulate_responses(thetas, bank, 1, rng)
    p = 1.0 / (1.0 + math.exp(0.6))
    rate = resp.codes[:, 0].mean()
    assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / 10000)


def test_simulate_responses_saturation(rng):
    bank = ItemBank([Item("i", "2PL", 1.0, (0.0,))])
    resp = simulate_responses(np.full(200, 50.0), bank, 1, rng)
    assert np.all(resp.codes[:, 0] == 1)


def test_sample_theta_gaussian_case(rng):
    bank = ItemBank([Item("i", "2PL", 1.0, (0.0,))])
    spec = ThetaPosteriorSpec(np.array([], dtype=int), np.array([], dtype=int), 0.3, 1.0)
    draws = np.array([sample_theta(spec, bank, rng) for _ in range(100000)])
    assert abs(draws.mean() - 0.3) <= 0.01


def _item_posterior_oracle(item_ll, prior_mean, prior_var):
    def integrand(t):
        return math.exp(
            item_ll.eval(t)[0] - (t - prior_mean) ** 2 / (2 * prior_var)
        )

    z, _ = quad(integrand, -12, 12, limit=200)
    m1, _ = quad(lambda t: t * integrand(t), -12, 12, limit=200)
    m2, _ = quad(lambda t: t * t * integrand(t), -12, 12, limit=200)
    return m1 / z, m2 / z - (m1 / z) ** 2


def test_sample_theta_one_item_oracle(rng):
    bank = ItemBank([Item("i", "2PL", 1.0, (0.0,))])
    spec = ThetaPosteriorSpec(np.array([0]), np.array([1]), 0.0, 1.0)
    item_ll = ItemLoglik([bank.items[0]], [1])
    mean_o, var_o = _item_posterior_oracle(item_ll, 0.0, 1.0)
    n = 100000
    draws = np.array([sample_theta(spec, bank, rng) for _ in range(n)])
    se = math.sqrt(var_o / n)
    assert abs(draws.mean() - mean_o) <= 3 * se
    assert abs(draws.var() / var_o - 1.0) <= 0.05


def test_sample_theta_gpcm_histogram_tv(rng):
    item = Item("g", "GPCM", 1.1, (0.5, -0.3, 0.2))
    bank = ItemBank([item])
    spec = ThetaPosteriorSpec(np.array([0]), np.array([3]), 0.0, 1.0)  # full credit
    item_ll = ItemLoglik([item], [3])
    n = 100000
    draws = np.array([sample_theta(spec, bank, rng) for _ in range(n)])
    edges = np.linspace(-4, 5, 46)
    hist, _ = np.histogram(draws, bins=edges)
    emp = hist / n

    def integrand(t):
        return math.exp(item_ll.eval(t)[0] - t * t / 2)

    z, _ = quad(integrand, -12, 12, limit=200)
    probs = np.array([
        quad(integrand, edges[i], edges[i + 1], limit=100)[0] / z
        for i in range(len(edges) - 1)
    ])
    tv = 0.5 * (np.abs(emp - probs).sum() + max(0.0, 1.0 - probs.sum()))
    assert tv <= 0.02


def test_posterior_log_concavity(rng):
    # derivative of the log posterior decreases monotonically on a grid
    for _ in range(20):
        j = int(rng.integers(1, 6))
        items = []
        codes = []
        for _k in range(j):
            if rng.uniform() < 0.5:
                items.append(Item(f"d{_k}", "2PL", float(rng.uniform(0.3, 2.0)),
                                  (float(rng.uniform(-2, 2)),)))
                codes.append(int(rng.integers(0, 2)))
            else:
                b = tuple(float(x) for x in rng.uniform(-1.5, 1.5, size=3))
                items.append(Item(f"g{_k}", "GPCM", float(rng.uniform(0.3, 2.0)), b))
                codes.append(int(rng.integers(0, 4)))
        ll = ItemLoglik(items, codes)
        grid = np.linspace(-6, 6, 101)
        derivs = [ll.eval(t)[1] - t for t in grid]  # prior N(0,1)
        assert np.all(np.diff(derivs) < 1e-9)


def test_batch_sampler_matches_quadrature(rng):
    # randomized specs: batch draws reproduce oracle moments
    for trial in range(3):
        items = [
            Item("x", "2PL", float(rng.uniform(0.5, 1.5)), (float(rng.uniform(-1, 1)),)),
            Item("y", "2PL", float(rng.uniform(0.5, 1.5)), (float(rng.uniform(-1, 1)),)),
            Item("g", "GPCM", float(rng.uniform(0.5, 1.5)),
                 tuple(float(v) for v in rng.uniform(-1, 1, 2))),
        ]
        codes = [int(rng.integers(0, 2)), int(rng.integers(0, 2)), int(rng.integers(0, 3))]
        bank = ItemBank(items)
        n = 60000
        resp = ResponseData(np.tile(codes, (n, 1)), np.ones((n, 3), bool))
        lls = pack_student_logliks(resp, bank)
        sampler = BatchThetaSampler(BatchItemLoglik(lls))
        mu = float(rng.uniform(-0.5, 0.5))
        s2 = float(rng.uniform(0.5, 1.5))
        draws = sampler.draw(np.full(n, mu), s2, rng)
        mean_o, var_o = _item_posterior_oracle(ItemLoglik(items, codes), mu, s2)
        assert abs(draws.mean() - mean_o) <= 3 * math.sqrt(var_o / n) + 1e-12
        assert abs(draws.var() / var_o - 1.0) <= 0.05


def test_batch_and_scalar_same_target(rng):
    # same posterior sampled by both implementations: moments agree
    bank = ItemBank([Item("i", "2PL", 1.3, (-0.4,))])
    n = 50000
    resp = ResponseData(np.ones((n, 1), dtype=int), np.ones((n, 1), bool))
    sampler = BatchThetaSampler(BatchItemLoglik(pack_student_logliks(resp, bank)))
    batch = sampler.draw(np.zeros(n), 1.0, rng)
    spec = ThetaPosteriorSpec(np.array([0]), np.array([1]), 0.0, 1.0)
    scalar = np.array([sample_theta(spec, bank, rng) for _ in range(20000)])
    assert abs(batch.mean() - scalar.mean()) <= 0.02
    assert abs(batch.std() / scalar.std() - 1.0) <= 0.03
