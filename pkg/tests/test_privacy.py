import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from dpnc.errors import BudgetExceeded, ConstantOverflow
from dpnc.privacy import (Budget, Ledger, compose_advanced, gaussian_sigma, laplace_inverse_cdf,
                          laplace_sample, lsi_dp_epsilon, stroock_clsi)


def test_budget_validation():
    with pytest.raises(ValueError):
        Budget(-0.1, 0.0)
    with pytest.raises(ValueError):
        Budget(1.0, 1.5)
    assert Budget(1.0, 0.5).scaled(0.5) == Budget(0.5, 0.25)


@pytest.mark.parametrize("u,b,expected", [(0.5, 3.0, 0.0), (0.75, 1.0, math.log(2)),
                                          (0.25, 2.0, -2 * math.log(2))])
def test_laplace_quantile_examples(u, b, expected):
    assert laplace_inverse_cdf(u, b) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-3, 1e3))
def test_laplace_quantile_matches_piecewise_inverse(u, b):
    # Forming u - 1/2 costs about eps/u relative accuracy in the tails.
    got = laplace_inverse_cdf(u, b)
    assert got == pytest.approx(oracles.laplace_quantile(u, b), rel=1e-9, abs=1e-12 * b)


def test_laplace_quantile_rejects_bad_input():
    for u in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            laplace_inverse_cdf(u, 1.0)
    with pytest.raises(ValueError):
        laplace_inverse_cdf(0.3, 0.0)


def test_laplace_samples_pass_ks():
    rng = np.random.default_rng(12345)
    b = 1.7
    x = laplace_sample(rng, b, 100_000)
    res = stats.kstest(x, lambda t: oracles.laplace_cdf(t, b))
    assert res.pvalue > 1e-3


def test_laplace_zero_scale_is_exact_zero():
    rng = np.random.default_rng(0)
    assert laplace_sample(rng, 0.0) == 0.0
    assert np.array_equal(laplace_sample(rng, 0.0, 4), np.zeros(4))


def test_gaussian_sigma_examples():
    with pytest.raises(ValueError):
        gaussian_sigma(1.0, 1.0, 1.0)
    s = gaussian_sigma(1.0, 0.999999999, 1e-5)
    assert s == pytest.approx(math.sqrt(2 * math.log(1.25e5)), rel=1e-8)
    assert s == pytest.approx(4.84481, abs=1e-5)
    assert gaussian_sigma(2.0, 0.5, 1e-5) == pytest.approx(4 * math.sqrt(2 * math.log(1.25e5)))


@pytest.mark.parametrize("k", [1, 4, 16])
def test_advanced_split_matches_hand_formula(k):
    per = compose_advanced(Budget(0.5, 1e-6), k)
    eps, delta = oracles.advanced_split(0.5, 1e-6, k)
    assert per.epsilon == pytest.approx(eps, rel=1e-12)
    assert per.delta == pytest.approx(delta, rel=1e-12)


def test_advanced_split_examples():
    assert compose_advanced(Budget(0.5, 1e-6), 1).epsilon == pytest.approx(0.0464, abs=5e-5)
    per4 = compose_advanced(Budget(0.5, 1e-6), 4)
    assert per4.epsilon == pytest.approx(0.0232, abs=5e-5)
    assert per4.delta == pytest.approx(1.25e-7, rel=1e-12)
    with pytest.raises(ValueError, match="0.9"):
        compose_advanced(Budget(0.95, 1e-6), 2)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 0.9), st.floats(1e-10, 0.5), st.integers(1, 10_000))
def test_advanced_split_recomposes_to_the_total(eps, delta, k):
    per = compose_advanced(Budget(eps, delta), k)
    # The split inverts: 2 sqrt(2k ln(2/delta)) eps_i = eps and 2k delta_i = delta.
    assert 2 * math.sqrt(2 * k * math.log(2 / delta)) * per.epsilon == pytest.approx(eps, rel=1e-12)
    assert 2 * k * per.delta == pytest.approx(delta, rel=1e-12)


def test_lsi_and_stroock_examples():
    C = stroock_clsi(10.0, 1.0, 1.0, 1.0)
    assert C == pytest.approx(math.exp(10) / 10, rel=1e-12)
    assert C == pytest.approx(2202.65, abs=0.01)
    eps = lsi_dp_epsilon(1.0, 10.0, 1000, C, 1e-6)
    assert eps == pytest.approx(5.02, abs=0.01)
    assert lsi_dp_epsilon(1.0, 10.0, 1000, 0.0, 1e-6) == 0.0
    assert lsi_dp_epsilon(1.0, 10.0, 2000, C, 1e-6) == pytest.approx(eps / 2, rel=1e-14)
    assert stroock_clsi(3.0, 2.0, 0.0, 1.0) == pytest.approx(1 / 6)
    with pytest.raises(ConstantOverflow):
        stroock_clsi(1000.0, 1.0, 1.0, 1.0)


def test_ledger_total_is_exact_sum():
    ledger = Ledger(Budget(1.0, 1e-5))
    costs = [(0.1, 1e-7, 3), (0.05, 0.0, 4), (0.125, 2e-6, 1)]
    for i, (e, d, c) in enumerate(costs):
        ledger.charge(f"m{i}", e, d, c)
    eps, delta = ledger.exact_totals()
    assert eps == sum(Fraction(e) * c for e, _, c in costs)
    assert delta == sum(Fraction(d) * c for _, d, c in costs)


def test_strict_ledger_aborts_and_rolls_back():
    ledger = Ledger(Budget(0.5, 0.0))
    ledger.charge("a", 0.25)
    ledger.charge("b", 0.25)
    with pytest.raises(BudgetExceeded):
        ledger.charge("c", 1e-12)
    assert len(ledger.entries) == 2
    assert ledger.within_target()
    loose = Ledger(Budget(0.5, 0.0), strict=False)
    loose.charge("a", 1.0)
    assert not loose.within_target()


def test_advanced_group_counts_in_full_and_caps_accesses():
    ledger = Ledger(Budget(0.5, 1e-6))
    acc = ledger.reserve_advanced("o1", Budget(0.25, 5e-7), 3)
    assert ledger.totals() == Budget(0.25, 5e-7)
    acc.spend()
    acc.spend(2)
    with pytest.raises(BudgetExceeded):
        acc.spend()
    with pytest.raises(BudgetExceeded):
        ledger.reserve_parallel("p", Budget(0.5, 0.0))
    ledger.reserve_parallel("p", Budget(0.25, 5e-7))
    assert ledger.within_target()
    assert ledger.exact_totals() == (Fraction(0.5), Fraction(1e-6))


def test_ledger_json_round_trip():
    ledger = Ledger(Budget(1.0, 1e-6))
    ledger.charge("sel", 0.5)
    data = json.loads(ledger.to_json())
    assert data["total_epsilon"] == 0.5
    assert data["entries"][0]["label"] == "sel"
    assert data["entries"][0]["count"] == 1
