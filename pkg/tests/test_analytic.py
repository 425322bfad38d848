import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadhedge.analytic import (
    bartlett_delta,
    bartlett_policy,
    bs_call,
    delta_policy,
    norm_pdf,
    sabr_f,
    sabr_f_prime,
    sabr_implied_vol,
)
from quadhedge.ledger import ContractSpec, HedgeState
from quadhedge.market import MarketConfig

import oracles

T30 = 30 / 365


def test_atm_reference_values():
    # frozen from an independent mpmath quadrature
    g = bs_call(100.0, 100.0, 0.2, T30)
    assert g.price == pytest.approx(2.287150628044969, abs=1e-12)
    assert g.delta == pytest.approx(0.5114357531402248, abs=1e-12)


def test_bs_matches_quadrature_on_grid():
    rng = np.random.default_rng(5)
    for _ in range(100):
        k = 100.0
        s = k * math.exp(rng.uniform(-0.3, 0.3))
        vol = rng.uniform(0.05, 0.6)
        ttm = rng.uniform(5, 120) / 365
        g = bs_call(s, k, vol, ttm)
        p, d = oracles.quad_call(s, k, vol, ttm)
        assert abs(g.price - p) < 1e-8
        assert abs(g.delta - d) < 1e-8


def test_deep_itm_and_zero_vol_limits():
    g = bs_call(1e6, 100.0, 0.2, T30)
    assert g.delta == pytest.approx(1.0, abs=1e-12)
    assert g.price == pytest.approx(1e6 - 100.0, rel=1e-6)
    g = bs_call(105.0, 100.0, 1e-9, T30)
    assert g.price == pytest.approx(5.0, abs=1e-9)
    assert g.delta == pytest.approx(1.0)


def test_expiry_branch():
    assert bs_call(101.0, 100.0, 0.2, 0.0).delta == 1.0
    assert bs_call(99.0, 100.0, 0.2, 0.0).delta == 0.0
    g = bs_call(100.0, 100.0, 0.2, 0.0)
    assert g.delta == 0.5 and g.price == 0.0 and g.vega == 0.0


def test_bs_rejects_bad_inputs():
    with pytest.raises(ValueError):
        bs_call(-1.0, 100.0, 0.2, T30)
    with pytest.raises(ValueError):
        bs_call(100.0, 100.0, 0.0, T30)
    with pytest.raises(ValueError):
        bs_call(100.0, 100.0, 0.2, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(60, 140), st.floats(0.05, 0.8), st.floats(1 / 365, 1.0))
def test_bs_invariants(s, vol, ttm):
    g = bs_call(s, 100.0, vol, ttm)
    assert 0 < g.delta < 1 or g.delta in (0.0, 1.0)
    assert g.vega >= 0
    assert g.price >= max(s - 100.0, 0.0) - 1e-12
    # delta increasing in spot, price convex in strike
    assert bs_call(s * 1.01, 100.0, vol, ttm).delta >= g.delta
    ks = np.array([95.0, 100.0, 105.0])
    p = bs_call(s, ks, vol, ttm).price
    assert p[0] - 2 * p[1] + p[2] >= -1e-10


def test_f_two_implementations_agree():
    for rho in (-0.8, 0.0, 0.5, 0.8):
        for y in np.linspace(-3, 3, 61):
            if abs(y) < 1e-3:
                continue
            assert abs(sabr_f(y, rho) - oracles.f_direct(y, rho)) < 1e-12


def test_f_at_zero_and_series():
    for rho in (-0.8, 0.0, 0.5):
        assert sabr_f(0.0, rho) == 1.0
        # continuous across the series cutoff
        for y in (5e-9, 2e-8, -2e-8):
            assert sabr_f(y, rho) == pytest.approx(1 + rho * y / 4, abs=1e-14)
        # derivative at 0 is rho/4 (series oracle)
        assert sabr_f_prime(0.0, rho) == pytest.approx(rho / 4, abs=1e-15)


def test_f_prime_matches_finite_differences():
    for rho in (-0.8, 0.0, 0.5, 0.8):
        for y in np.linspace(-3, 3, 121):
            h = 1e-6 * max(1.0, abs(y))
            fd = (sabr_f(y + h, rho) - sabr_f(y - h, rho)) / (2 * h)
            exact = sabr_f_prime(y, rho)
            assert abs(exact - fd) <= 1e-6 * max(abs(fd), 1e-3)


def test_f_domain_error():
    with pytest.raises(ValueError):
        sabr_f(0.1, 1.0)
    with pytest.raises(ValueError):
        sabr_implied_vol(100, 100, 0.2, 0.95, -1.0)


def test_implied_vol_examples():
    assert sabr_implied_vol(100.0, 100.0, 0.2, 0.95, 0.5) == 0.2
    assert sabr_implied_vol(100.0, 130.0, 0.2, 0.0, 0.5) == 0.2
    expected = 0.2 * oracles.f_direct(0.95 * math.log(1.05) / 0.2, 0.5)
    assert sabr_implied_vol(100.0, 105.0, 0.2, 0.95, 0.5) == pytest.approx(expected, abs=1e-12)
    # 50-digit evaluation
    assert sabr_implied_vol(100.0, 105.0, 0.2, 0.95, 0.5) == pytest.approx(0.20605154603468518258, abs=1e-13)


def test_bartlett_regression_pins():
    # independent 50-digit evaluation of the three formulas
    assert bartlett_delta(100.0, 100.0, 0.2, T30, 0.95, 0.5) == pytest.approx(0.52501198986583148857, abs=1e-12)
    assert bartlett_delta(100.0, 105.0, 0.2, T30, 0.95, 0.5) == pytest.approx(0.22192620750945223461, abs=1e-12)
    assert bartlett_delta(95.0, 100.0, 0.2, T30, 0.95, 0.5) == pytest.approx(0.20988391181116751902, abs=1e-12)


def test_bartlett_reduces_to_bs_when_eta_zero():
    for s in np.linspace(80, 120, 21):
        for ttm in (1 / 365, T30, 0.5):
            assert abs(bartlett_delta(s, 100.0, 0.25, ttm, 0.0, 0.5) - bs_call(s, 100.0, 0.25, ttm).delta) < 1e-12


def test_bartlett_atm_correction():
    eta, rho, ttm = 0.95, 0.5, T30
    g = bs_call(100.0, 100.0, 0.2, ttm)
    corr = 0.5 * eta * norm_pdf(g.d_plus) * math.sqrt(ttm) * (rho - 2 * rho / 4)
    assert bartlett_delta(100.0, 100.0, 0.2, ttm, eta, rho) - g.delta == pytest.approx(corr, abs=1e-14)
    # shrinks with the square root of time to maturity
    small = bartlett_delta(100.0, 100.0, 0.2, 1e-10, eta, rho) - bs_call(100.0, 100.0, 0.2, 1e-10).delta
    assert abs(small) < 1e-5


def test_policies():
    con = ContractSpec()
    m = MarketConfig()
    dp = delta_policy(con, 0.2, m)
    st_itm = HedgeState(29, 1 / 365, 150.0, 1.0)
    assert dp(st_itm) == pytest.approx(1.0)
    short = delta_policy(ContractSpec(contracts=3), 0.2, m)(HedgeState(0, T30, 100.0, 0.0))
    long_ = delta_policy(ContractSpec(side="long_call", contracts=3), 0.2, m)(HedgeState(0, T30, 100.0, 0.0))
    assert short == pytest.approx(3 * 0.5114357531402248) and long_ == pytest.approx(-short)
    flat = MarketConfig(model_kind="SABR", eta=0.0)
    bp = bartlett_policy(con, flat)
    states = HedgeState(3, 0.05, np.linspace(90, 110, 5), np.zeros(5))
    np.testing.assert_allclose(bp(states, np.full(5, 0.2)), delta_policy(con, 0.2, flat)(states), atol=1e-12)
