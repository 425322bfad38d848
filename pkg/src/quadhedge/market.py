"""Discounted spot paths under Black-Scholes or lognormal SABR dynamics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


MODEL_KINDS = ("BS", "SABR")

# training and evaluation draw from disjoint seed ranges above a base seed
SEED_NAMESPACE = 1_000_000
TRAIN_NAMESPACE = 0
EVAL_NAMESPACE = 1


def namespaced_seed(base_seed: int, namespace: int, k: int) -> int:
    if not 0 <= k < SEED_NAMESPACE:
        raise ConfigError("seed", f"path index {k} outside [0, {SEED_NAMESPACE})")
    return int(base_seed) + namespace * SEED_NAMESPACE + int(k)


def train_seeds(base_seed: int, start: int, count: int) -> list[int]:
    return [namespaced_seed(base_seed, TRAIN_NAMESPACE, start + k) for k in range(count)]


def eval_seeds(base_seed: int, count: int) -> list[int]:
    return [namespaced_seed(base_seed, EVAL_NAMESPACE, k) for k in range(count)]


@dataclass(frozen=True)
class MarketConfig:
    """Market parameters. Defaults are the Black-Scholes / SABR base case.

    ``n_steps`` defaults to one rebalancing per calendar day of maturity.
    """

    model_kind: str = "BS"
    s0: float = 100.0
    mu: float = 0.05
    sigma0: float = 0.20
    eta: float = 0.95
    rho: float = 0.5
    ir: float = 0.0
    maturity_days: float = 30
    n_steps: int | None = None
    day_count: float = 365.0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError("model_kind", f"must be one of {MODEL_KINDS}")
        if not self.s0 > 0:
            raise ConfigError("s0", "must be > 0")
        if not self.sigma0 > 0:
            raise ConfigError("sigma0", "must be > 0")
        if not self.eta >= 0:
            raise ConfigError("eta", "must be >= 0")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError("rho", "must lie in [-1, 1]")
        if not self.maturity_days > 0:
            raise ConfigError("maturity_days", "must be > 0")
        if self.n_steps is not None and (int(self.n_steps) != self.n_steps or self.n_steps < 1):
            raise ConfigError("n_steps", "must be an integer >= 1")
        if self.n_steps is None and round(self.maturity_days) < 1:
            raise ConfigError("maturity_days", "daily grid needs at least one day")
        if not self.day_count > 0:
            raise ConfigError("day_count", "must be > 0")
        for name in ("mu", "ir"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(name, "must be finite")

    @property
    def steps(self) -> int:
        """Number of rebalancing intervals (``n_steps`` or one per day)."""
        return int(self.n_steps) if self.n_steps is not None else int(round(self.maturity_days))

    @property
    def maturity(self) -> float:
        """Maturity in years."""
        return self.maturity_days / self.day_count

    @property
    def dt(self) -> float:
        return self.maturity / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class MarketPath:
    times: np.ndarray
    spot: np.ndarray  # discounted
    vol: np.ndarray  # latent for learned agents
    seed: int = field(default=0)
    ir: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def _draw(cfg: MarketConfig, seed: int):
    rng = np.random.default_rng(seed)
    # both columns are drawn for every model so BS and SABR share spot shocks
    z = rng.standard_normal((cfg.steps, 2))
    dt = cfg.dt
    sqdt = math.sqrt(dt)
    if cfg.model_kind == "SABR":
        z_vol = cfg.rho * z[:, 0] + math.sqrt(max(0.0, 1.0 - cfg.rho**2)) * z[:, 1]
        half_eta = 0.5 * cfg.eta
        log_vol_incr = -0.5 * half_eta**2 * dt + half_eta * sqdt * z_vol
        vol = cfg.sigma0 * np.exp(np.concatenate(([0.0], np.cumsum(log_vol_incr))))
    else:
        vol = np.full(cfg.steps + 1, cfg.sigma0)
    sig = vol[:-1]
    log_incr = (cfg.mu - 0.5 * sig * sig) * dt + sig * sqdt * z[:, 0]
    spot = cfg.s0 * np.exp(np.concatenate(([0.0], np.cumsum(log_incr))))
    times = cfg.times
    if cfg.ir != 0.0:
        spot = spot * np.exp(-cfg.ir * times)
    return times, spot, vol


def simulate_path(cfg: MarketConfig, seed: int) -> MarketPath:
    """One path of discounted spot (exact log-Euler) and instantaneous vol."""
    times, spot, vol = _draw(cfg, int(seed))
    return MarketPath(times=times, spot=spot, vol=vol, seed=int(seed), ir=cfg.ir)


def simulate_batch(cfg: MarketConfig, n_paths: int, base_seed: int) -> list[MarketPath]:
    if n_paths < 1:
        raise ConfigError("n_paths", "must be >= 1")
    return [simulate_path(cfg, base_seed + k) for k in range(n_paths)]


def simulate_arrays(cfg: MarketConfig, seeds) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``(spot, vol)`` arrays of shape ``(len(seeds), n_steps + 1)``.

    Row ``k`` is bit-identical to ``simulate_path(cfg, seeds[k])``.
    """
    seeds = list(seeds)
    n = len(seeds)
    spot = np.empty((n, cfg.steps + 1))
    vol = np.empty((n, cfg.steps + 1))
    for k, s in enumerate(seeds):
        _, spot[k], vol[k] = _draw(cfg, int(s))
    return spot, vol


def write_paths_csv(paths: list[MarketPath], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["seed", "step", "time", "spot_discounted", "vol"])
    for p in paths:
        for i in range(len(p.times)):
            w.writerow([p.seed, i, repr(float(p.times[i])), repr(float(p.spot[i])), repr(float(p.vol[i]))])
