"""Closed-form baselines: Black-Scholes greeks, SABR implied vol, Bartlett's delta.

All formulas take discounted spot and discounted strike, so rates never
appear explicitly.  Functions accept scalars or numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# below these |y| the SABR f / f' switch to their Taylor series
F_SERIES_CUTOFF = 1e-8
FPRIME_SERIES_CUTOFF = 1e-4


def norm_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=float) / SQRT2))


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class BsGreeks:
    price: float | np.ndarray
    delta: float | np.ndarray
    vega: float | np.ndarray
    d_plus: float | np.ndarray
    d_minus: float | np.ndarray


def bs_call(spot_disc, strike_disc, vol, ttm) -> BsGreeks:
    """Zero-rate Black-Scholes call on discounted quantities.

    At ``ttm == 0`` the intrinsic branch is used: price ``(S-K)+``, delta 1
    above the strike, 0 below and 0.5 exactly at it, vega 0.
    """
    s = np.asarray(spot_disc, dtype=float)
    k = np.asarray(strike_disc, dtype=float)
    vol = np.asarray(vol, dtype=float)
    ttm = np.asarray(ttm, dtype=float)
    if np.any(s <= 0) or np.any(k <= 0):
        raise ValueError("spot and strike must be positive")
    if np.any(ttm < 0):
        raise ValueError("time to maturity must be non-negative")
    live = ttm > 0
    if np.any(live & (vol <= 0)):
        raise ValueError("volatility must be positive")

    sd = np.where(live, vol * np.sqrt(np.where(live, ttm, 1.0)), 1.0)
    logm = np.log(s / k)
    expired = np.where(logm > 0, np.inf, np.where(logm < 0, -np.inf, 0.0))
    d_plus = np.where(live, logm / sd + 0.5 * sd, expired)
    d_minus = np.where(live, d_plus - sd, expired)
    price = np.where(live, s * norm_cdf(d_plus) - k * norm_cdf(d_minus), np.maximum(s - k, 0.0))
    delta = np.where(live, norm_cdf(d_plus), np.where(s > k, 1.0, np.where(s < k, 0.0, 0.5)))
    vega = np.where(live, s * norm_pdf(d_plus) * np.sqrt(np.where(live, ttm, 0.0)), 0.0)
    return BsGreeks(*(_squeeze(a) for a in (price, delta, vega, d_plus, d_minus)))


def _squeeze(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


def _check_rho(rho):
    if np.any(np.abs(np.asarray(rho, dtype=float)) >= 1.0):
        raise ValueError("SABR correlation must satisfy |rho| < 1")


def _log_ratio(y, rho):
    """``log(1-rho) - log(sqrt(1+rho*y+y^2/4) - rho - y/2)``, cancellation-free near 0."""
    q = 1.0 + rho * y + 0.25 * y * y
    root = np.sqrt(q)
    # g - (1 - rho) with the sqrt(q) - 1 difference rationalised
    u = ((rho * y + 0.25 * y * y) / (root + 1.0) - 0.5 * y) / (1.0 - rho)
    return -np.log1p(u), root


def sabr_f(y, rho):
    """The lognormal SABR smile factor ``f`` with ``f(0) = 1``."""
    _check_rho(rho)
    y = np.asarray(y, dtype=float)
    rho = float(rho)
    small = np.abs(y) < F_SERIES_CUTOFF
    ys = np.where(small, 1.0, y)
    d, _ = _log_ratio(ys, rho)
    direct = 0.5 * ys / d
    series = 1.0 + rho * y / 4.0 + (2.0 - 3.0 * rho * rho) * y * y / 48.0
    return _squeeze(np.where(small, series, direct))


def sabr_f_prime(y, rho):
    """Closed-form derivative of :func:`sabr_f` in ``y``.

    With ``D(y)`` the denominator of ``f`` one has ``D'(y) = 1/(2 sqrt(q))``,
    ``q = 1 + rho*y + y^2/4``, hence ``f' = 1/(2D) - y/(4 D^2 sqrt(q))``.
    """
    _check_rho(rho)
    y = np.asarray(y, dtype=float)
    rho = float(rho)
    small = np.abs(y) < FPRIME_SERIES_CUTOFF
    ys = np.where(small, 1.0, y)
    d, root = _log_ratio(ys, rho)
    direct = 0.5 / d - ys / (4.0 * d * d * root)
    c1 = rho / 4.0
    c2 = (2.0 - 3.0 * rho**2) / 48.0
    c3 = rho * (6.0 * rho**2 - 5.0) / 192.0
    c4 = -(225.0 * rho**4 - 240.0 * rho**2 + 34.0) / 11520.0
    series = c1 + y * (2 * c2 + y * (3 * c3 + y * 4 * c4))
    return _squeeze(np.where(small, series, direct))


def sabr_moneyness(spot_disc, strike_disc, sigma_t, eta):
    return eta / np.asarray(sigma_t, dtype=float) * np.log(
        np.asarray(strike_disc, dtype=float) / np.asarray(spot_disc, dtype=float)
    )


def sabr_implied_vol(spot_disc, strike_disc, sigma_t, eta, rho):
    """Approximate implied vol ``sigma_t * f(M)`` of the beta=1 SABR model."""
    if np.any(np.asarray(sigma_t) <= 0):
        raise ValueError("sigma_t must be positive")
    m = sabr_moneyness(spot_disc, strike_disc, sigma_t, eta)
    return _squeeze(np.asarray(sigma_t, dtype=float) * sabr_f(m, rho))


def bartlett_delta(spot_disc, strike_disc, sigma_t, ttm, eta, rho):
    """Bartlett's delta: BS delta at the SABR vol plus the spot-vol correlation term."""
    if np.any(np.asarray(ttm) <= 0):
        raise ValueError("bartlett_delta needs ttm > 0")
    m = sabr_moneyness(spot_disc, strike_disc, sigma_t, eta)
    fm = sabr_f(m, rho)
    implied = np.asarray(sigma_t, dtype=float) * fm
    g = bs_call(spot_disc, strike_disc, implied, ttm)
    correction = (
        0.5 * eta * norm_pdf(g.d_plus) * np.sqrt(ttm)
        * (rho * fm - (rho * m + 2.0) * sabr_f_prime(m, rho))
    )
    return _squeeze(g.delta + correction)


# -- baseline policies ---------------------------------------------------------

def _side_sign(contract) -> float:
    return 1.0 if contract.side == "short_call" else -1.0


class DeltaPolicy:
    """Black-Scholes delta hedge at a fixed volatility."""

    needs_latent_vol = False

    def __init__(self, contract, vol: float, maturity: float, ir: float = 0.0):
        self.contract = contract
        self.vol = float(vol)
        self.strike_disc = contract.strike * math.exp(-ir * maturity)

    def __call__(self, state):
        ttm = np.asarray(state.time_to_maturity, dtype=float)
        delta = bs_call(state.spot_discounted, self.strike_disc, self.vol, ttm).delta
        return _side_sign(self.contract) * self.contract.contracts * delta


class BartlettPolicy:
    """Bartlett's delta; reads the path's latent volatility (baseline privilege)."""

    needs_latent_vol = True

    def __init__(self, contract, eta: float, rho: float, maturity: float, ir: float = 0.0):
        _check_rho(rho)
        self.contract = contract
        self.eta = float(eta)
        self.rho = float(rho)
        self.strike_disc = contract.strike * math.exp(-ir * maturity)

    def __call__(self, state, latent_vol):
        ttm = np.asarray(state.time_to_maturity, dtype=float)
        h = bartlett_delta(state.spot_discounted, self.strike_disc, latent_vol, ttm, self.eta, self.rho)
        return _side_sign(self.contract) * self.contract.contracts * np.asarray(h)


def delta_policy(contract, vol: float, market) -> DeltaPolicy:
    return DeltaPolicy(contract, vol, market.maturity, market.ir)


def bartlett_policy(contract, market) -> BartlettPolicy:
    return BartlettPolicy(contract, market.eta, market.rho, market.maturity, market.ir)


def call_premium(market, contract) -> float:
    """Time-0 Black-Scholes value of the hedged call at the initial volatility."""
    strike_disc = contract.strike * math.exp(-market.ir * market.maturity)
    if market.model_kind == "SABR" and market.rho is not None and abs(market.rho) < 1:
        vol = sabr_implied_vol(market.s0, strike_disc, market.sigma0, market.eta, market.rho)
    else:
        vol = market.sigma0
    return contract.contracts * float(bs_call(market.s0, strike_disc, vol, market.maturity).price)


def initial_cash(value, market, contract) -> float:
    """Resolve a configured initial cash amount; ``"premium"`` means :func:`call_premium`."""
    if value == "premium":
        return call_premium(market, contract)
    return float(value)
