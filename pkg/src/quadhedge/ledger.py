"""Self-financing trading ledger with proportional transaction costs.

Everything is in discounted units, so the wealth recursion is

    Y[i+1] = Y[i] + H[i] * (S[i+1] - S[i]) - TC(H[i], H[i-1], S[i])

and the per-step reward (cash-flow form) is the increment ``Y[i+1] - Y[i]``.
At maturity the position is liquidated and the option liability settled,
both folded into the last reward.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .market import ConfigError, MarketPath

SIDES = ("short_call", "long_call")


class LedgerError(ValueError):
    """Structural mismatch between a path, a policy, or reference values."""


@dataclass(frozen=True)
class ContractSpec:
    strike: float = 100.0
    side: str = "short_call"
    contracts: float = 1.0

    def __post_init__(self):
        if not self.strike > 0:
            raise ConfigError("strike", "must be > 0")
        if self.side not in SIDES:
            raise ConfigError("side", f"must be one of {SIDES}")
        if not self.contracts > 0:
            raise ConfigError("contracts", "must be > 0")

    @property
    def sign(self) -> float:
        """+1 when the hedger is short the call (owes the payoff)."""
        return 1.0 if self.side == "short_call" else -1.0

    def liability(self, spot_T, strike_disc):
        """Discounted amount the hedger pays at maturity (negative if received)."""
        return self.sign * self.contracts * np.maximum(np.asarray(spot_T) - strike_disc, 0.0)


@dataclass(frozen=True)
class CostSpec:
    alpha: float = 0.001
    liquidate: bool = True

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("alpha", "alpha >= 0 required")


@dataclass(frozen=True)
class HedgeState:
    """Observable decision state. Fields may be scalars or equal-length arrays."""

    step_index: int
    time_to_maturity: float | np.ndarray
    spot_discounted: float | np.ndarray
    holding_prev: float | np.ndarray


@dataclass
class EpisodeLedger:
    spot: np.ndarray
    holdings: np.ndarray
    tc: np.ndarray  # per trade, length N+1 (last entry = liquidation)
    rewards: np.ndarray
    y0: float
    payoff: float
    terminal_wealth: float

    @property
    def tc_total(self) -> float:
        return float(self.tc.sum())

    @property
    def hedging_error(self) -> float:
        return self.payoff - self.terminal_wealth

    @property
    def hedging_cost(self) -> float:
        """Positive = loss. Equals ``-(y0 + sum(rewards))``."""
        return self.hedging_error

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "spot", "holding", "trade", "tc", "reward"])
        held = np.concatenate((self.holdings, [0.0]))
        prev = np.concatenate(([0.0], self.holdings))
        for i in range(len(held)):
            reward = repr(float(self.rewards[i])) if i < len(self.rewards) else ""
            w.writerow([i, repr(float(self.spot[i])), repr(float(held[i])),
                        repr(float(held[i] - prev[i])), repr(float(self.tc[i])), reward])


def transaction_cost(h_new, h_old, spot, cost: CostSpec):
    """Proportional cost ``alpha * spot * |h_new - h_old|``."""
    return cost.alpha * np.asarray(spot) * np.abs(np.asarray(h_new) - np.asarray(h_old))


def strike_discounted(contract: ContractSpec, path_or_maturity, ir: float = 0.0) -> float:
    if isinstance(path_or_maturity, MarketPath):
        return contract.strike * math.exp(-path_or_maturity.ir * path_or_maturity.times[-1])
    return contract.strike * math.exp(-ir * path_or_maturity)


def build_state(path: MarketPath, step: int, holding_prev, contract: ContractSpec) -> HedgeState:
    """State seen by a policy at ``step``. Never exposes the latent volatility."""
    n = path.n_steps
    if not 0 <= step <= n:
        raise LedgerError(f"step {step} outside [0, {n}]")
    return HedgeState(
        step_index=step,
        time_to_maturity=float(path.times[-1] - path.times[step]),
        spot_discounted=float(path.spot[step]),
        holding_prev=holding_prev,
    )


@dataclass
class BatchResult:
    holdings: np.ndarray  # (n, N)
    tc: np.ndarray  # (n, N+1)
    rewards: np.ndarray  # (n, N)
    payoff: np.ndarray  # (n,)
    y0: float

    @property
    def terminal_wealth(self) -> np.ndarray:
        return self.y0 + self.rewards.sum(axis=1) + self.payoff

    @property
    def hedging_cost(self) -> np.ndarray:
        return -(self.y0 + self.rewards.sum(axis=1))


def _call_policy(policy, state, vol_column):
    if getattr(policy, "needs_latent_vol", False):
        return policy(state, vol_column)
    return policy(state)


def run_batch(times, spots, vols, contract: ContractSpec, cost: CostSpec, policy,
              y0: float = 0.0, ir: float = 0.0) -> BatchResult:
    """Run ``policy`` on every row of ``spots`` simultaneously.

    ``policy`` maps a :class:`HedgeState` with array fields to an array of
    holdings; policies with ``needs_latent_vol`` also receive the vol column.
    """
    spots = np.atleast_2d(np.asarray(spots, dtype=float))
    vols = np.atleast_2d(np.asarray(vols, dtype=float))
    n_paths, n_points = spots.shape
    n = n_points - 1
    if len(times) != n_points:
        raise LedgerError("times and spot arrays disagree in length")
    expected = getattr(policy, "n_steps", None)
    if expected is not None and expected != n:
        raise LedgerError(f"policy built for {expected} steps, path has {n}")
    maturity = float(times[-1])
    k_disc = contract.strike * math.exp(-ir * maturity)

    holdings = np.empty((n_paths, n))
    tc = np.zeros((n_paths, n + 1))
    rewards = np.empty((n_paths, n))
    h_prev = np.zeros(n_paths)
    for i in range(n):
        state = HedgeState(i, maturity - float(times[i]), spots[:, i], h_prev)
        h = np.broadcast_to(np.asarray(_call_policy(policy, state, vols[:, i]), dtype=float), (n_paths,))
        if not np.all(np.isfinite(h)):
            raise LedgerError(f"policy returned non-finite holdings at step {i}")
        holdings[:, i] = h
        tc[:, i] = transaction_cost(h, h_prev, spots[:, i], cost)
        rewards[:, i] = h * (spots[:, i + 1] - spots[:, i]) - tc[:, i]
        h_prev = holdings[:, i]
    if cost.liquidate:
        tc[:, n] = transaction_cost(0.0, h_prev, spots[:, n], cost)
    payoff = contract.liability(spots[:, n], k_disc)
    rewards[:, n - 1] -= tc[:, n] + payoff
    return BatchResult(holdings, tc, rewards, payoff, float(y0))


def run_episode(path: MarketPath, contract: ContractSpec, cost: CostSpec, policy,
                y0: float = 0.0) -> EpisodeLedger:
    res = run_batch(path.times, path.spot[None, :], path.vol[None, :], contract, cost, policy,
                    y0=y0, ir=path.ir)
    return EpisodeLedger(
        spot=path.spot.copy(),
        holdings=res.holdings[0],
        tc=res.tc[0],
        rewards=res.rewards[0],
        y0=float(y0),
        payoff=float(res.payoff[0]),
        terminal_wealth=float(res.terminal_wealth[0]),
    )


def rewards_accounting(ledger: EpisodeLedger, ref_values) -> np.ndarray:
    """Accounting-form rewards: cash-flow rewards shifted by reference-value increments.

    ``ref_values`` has one entry per grid point with ``ref_values[-1]`` the
    terminal reference; the value before time 0 is taken as zero. The shifts
    telescope, so the total moves by exactly ``ref_values[-1]``.
    """
    ref = np.asarray(ref_values, dtype=float)
    n = len(ledger.rewards)
    if ref.shape != (n + 1,):
        raise LedgerError(f"expected {n + 1} reference values, got {ref.shape}")
    shift = np.diff(np.concatenate(([0.0], ref[:n])))
    shift[-1] += ref[n] - ref[n - 1]
    return ledger.rewards + shift


# -- features for learned agents --------------------------------------------

@dataclass(frozen=True)
class FeatureScaling:
    """Fixed affine map ``(raw - shift) / scale`` on (S/K, ttm, H_prev/contracts)."""

    shift: tuple[float, float, float]
    scale: tuple[float, float, float]

    @classmethod
    def default(cls, market, contract: ContractSpec) -> "FeatureScaling":
        t = market.maturity
        return cls(shift=(1.0, 0.5 * t, 0.5 * contract.sign),
                   scale=(market.sigma0 * math.sqrt(t), 0.5 * t, 0.5))


def raw_features(state: HedgeState, contract: ContractSpec) -> np.ndarray:
    s = np.atleast_1d(np.asarray(state.spot_discounted, dtype=float))
    ttm = np.broadcast_to(np.asarray(state.time_to_maturity, dtype=float), s.shape)
    h = np.broadcast_to(np.asarray(state.holding_prev, dtype=float), s.shape)
    return np.stack((s / contract.strike, ttm, h / contract.contracts), axis=-1)


def features(state: HedgeState, contract: ContractSpec, scaling: FeatureScaling) -> np.ndarray:
    """Normalised observable features, shape ``(n, 3)``."""
    return (raw_features(state, contract) - np.asarray(scaling.shift)) / np.asarray(scaling.scale)
