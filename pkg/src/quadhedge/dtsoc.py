"""Deep trajectory-based stochastic optimal control.

One small network per rebalancing date maps observable features to a
holding. A batch of paths is rolled forward through all networks, the
terminal cash balance ``C_T`` (trading gains minus costs minus the payoff,
plus an optional initial cash ``y0``) is squared and averaged, and the
gradient flows back through every date, including through each network's
influence on later transaction costs via ``H_prev``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .analytic import initial_cash
from .ledger import ContractSpec, CostSpec, FeatureScaling, HedgeState, LedgerError, features
from .market import ConfigError, MarketConfig, simulate_arrays, train_seeds
from .neural import (
    Adam,
    DivergenceMonitor,
    Mlp,
    MlpSpec,
    TrainingLog,
    load_checkpoint,
    net_from_dict,
    net_to_dict,
    save_checkpoint,
)

EPISODE_UNITS = ("paths", "batches")
LOG_COLUMNS = ("epoch", "loss", "lr", "wall_ms")


@dataclass
class DtsocConfig:
    """Training settings.

    ``episode_unit="paths"`` counts simulated paths (so the default budget is
    ``episodes / batch_size`` gradient steps); ``"batches"`` counts gradient
    steps. The learning rate is multiplied by ``lr_decay`` every
    ``lr_decay_every`` episodes in the same unit. Training paths come from a
    pool of at most ``path_pool`` distinct paths, reshuffled on every pass.

    ``y0="premium"`` starts every training episode with the BS premium as
    cash. Under drift the hedge can move the mean P&L, so a zero start would
    bias the squared-error optimum away from the variance-optimal hedge.
    Dropout is off by default; it slows convergence of the per-date holdings.
    """

    episodes: int = 50_000
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 10_000
    hidden: tuple = (10, 15, 10)
    dropout_p: float = 0.0
    layer_norm: bool = False
    shared_network: bool = False
    episode_unit: str = "batches"
    path_pool: int = 100_000
    output_init_scale: float = 0.1
    y0: float | str = "premium"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.episodes < 1:
            raise ConfigError("episodes", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay", "must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every", "must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p", "must lie in [0, 1)")
        if self.episode_unit not in EPISODE_UNITS:
            raise ConfigError("episode_unit", f"must be one of {EPISODE_UNITS}")
        if self.y0 != "premium" and not math.isfinite(float(self.y0)):
            raise ConfigError("y0", "must be a number or 'premium'")
        if self.path_pool < self.batch_size:
            raise ConfigError("path_pool", "must be >= batch_size")

    @property
    def n_epochs(self) -> int:
        if self.episode_unit == "batches":
            return self.episodes
        return math.ceil(self.episodes / self.batch_size)

    def lr_at(self, epoch: int) -> float:
        consumed = epoch * self.batch_size if self.episode_unit == "paths" else epoch
        return self.lr * self.lr_decay ** (consumed // self.lr_decay_every)


@dataclass
class DtsocAgent:
    nets: list
    contract: ContractSpec
    scaling: FeatureScaling
    n_steps: int
    maturity: float
    ir: float = 0.0
    shared: bool = False

    def net_for(self, step: int) -> Mlp:
        if not 0 <= step < self.n_steps:
            raise LedgerError(f"step {step} outside [0, {self.n_steps - 1}]")
        return self.nets[0] if self.shared else self.nets[step]

    @property
    def strike_disc(self) -> float:
        return self.contract.strike * math.exp(-self.ir * self.maturity)

    def train(self):
        for n in self.nets:
            n.train()
        return self

    def eval(self):
        for n in self.nets:
            n.eval()
        return self


def build_agent(cfg: DtsocConfig, market: MarketConfig, contract: ContractSpec,
                scaling: FeatureScaling | None = None) -> DtsocAgent:
    scaling = scaling or FeatureScaling.default(market, contract)
    spec = MlpSpec(3, cfg.hidden, dropout_p=cfg.dropout_p, layer_norm=cfg.layer_norm)
    count = 1 if cfg.shared_network else market.steps
    nets = []
    for m in range(count):
        net = Mlp(spec, seed=[cfg.seed, 100 + m])
        # start every date near a flat half hedge; a large output gain on the
        # H_prev feature would compound across dates
        net.params[-2][...] *= cfg.output_init_scale
        net.params[-1][...] = 0.5 * contract.sign * contract.contracts
        nets.append(net)
    return DtsocAgent(nets, contract, scaling, market.steps, market.maturity, market.ir,
                      cfg.shared_network)


def _loss_graph(agent: DtsocAgent, spots, cost: CostSpec, y0: float, tape: ad.Tape):
    spots = np.atleast_2d(np.asarray(spots, dtype=float))
    n_paths, n_points = spots.shape
    if n_points - 1 != agent.n_steps:
        raise LedgerError(f"agent built for {agent.n_steps} steps, paths have {n_points - 1}")
    c = agent.contract
    shift = np.asarray(agent.scaling.shift)
    scale = np.asarray(agent.scaling.scale)
    times = np.arange(agent.n_steps + 1) * (agent.maturity / agent.n_steps)
    payoff = c.liability(spots[:, -1], agent.strike_disc)
    alpha = cost.alpha
    h_prev = None
    wealth = None
    for i in range(agent.n_steps):
        s_i = spots[:, i]
        fixed = np.stack(((s_i / c.strike - shift[0]) / scale[0],
                          np.full(n_paths, (agent.maturity - times[i] - shift[1]) / scale[1])), axis=1)
        if h_prev is None:
            x = tape.constant(np.concatenate((fixed, np.full((n_paths, 1), (0.0 - shift[2]) / scale[2])), axis=1))
        else:
            with ad.recording(tape):
                h_feat = ad.reshape((h_prev * (1.0 / c.contracts) - shift[2]) * (1.0 / scale[2]), (n_paths, 1))
                x = ad.concat([tape.constant(fixed), h_feat], axis=1)
        out = agent.net_for(i).forward(x, tape)
        with ad.recording(tape):
            h = ad.reshape(out, (n_paths,))
            gain = h * (spots[:, i + 1] - s_i)
            if alpha > 0:
                trade = h if h_prev is None else h - h_prev
                gain = gain - ad.absolute(trade) * (alpha * s_i)
            wealth = gain if wealth is None else wealth + gain
        h_prev = h
    with ad.recording(tape):
        if alpha > 0 and cost.liquidate:
            wealth = wealth - ad.absolute(h_prev) * (alpha * spots[:, -1])
        terminal = wealth + (y0 - payoff)
        loss = ad.mean(ad.square(terminal))
    return loss, terminal


def rollout_loss(agent: DtsocAgent, spots, contract: ContractSpec, cost: CostSpec,
                 y0: float = 0.0):
    """``(loss, grads)`` for a batch of discounted spot paths, shape ``(n, N+1)``.

    ``grads`` is a list with one per-parameter gradient list per network.
    """
    if contract != agent.contract:
        raise LedgerError("contract differs from the one the agent was built for")
    tape = ad.Tape()
    loss, _ = _loss_graph(agent, spots, cost, y0, tape)
    grads = tape.backward(loss)
    return float(loss.value), [net.gradients(grads) for net in agent.nets]


def terminal_cash(agent: DtsocAgent, spots, cost: CostSpec, y0: float = 0.0) -> np.ndarray:
    """Per-path ``C_T`` in the current mode (no gradient)."""
    tape = ad.Tape()
    _, terminal = _loss_graph(agent, spots, cost, y0, tape)
    return np.asarray(terminal.value)


def train(cfg: DtsocConfig, market: MarketConfig, contract: ContractSpec, cost: CostSpec,
          progress=None, checkpoint_every: int = 0, checkpoint_path=None):
    """Fit the agent; returns ``(agent, TrainingLog)``. Deterministic given ``cfg.seed``."""
    agent = build_agent(cfg, market, contract).train()
    adams = [Adam(net, cfg.lr) for net in agent.nets]
    n_epochs = cfg.n_epochs
    total = n_epochs * cfg.batch_size
    pool_size = min(total, cfg.path_pool)
    spots, _ = simulate_arrays(market, train_seeds(cfg.seed, 0, pool_size))
    order_rng = np.random.default_rng([cfg.seed, 31])
    order = np.arange(pool_size)
    cursor = 0
    y0 = initial_cash(cfg.y0, market, contract)
    log = TrainingLog(LOG_COLUMNS)
    monitor = DivergenceMonitor()
    t0 = time.perf_counter()
    for epoch in range(n_epochs):
        if cursor + cfg.batch_size > pool_size:
            order = order_rng.permutation(pool_size)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        lr = cfg.lr_at(epoch)
        loss, grads = rollout_loss(agent, spots[idx], contract, cost, y0)
        monitor.update(loss, "loss")
        for adam, g in zip(adams, grads):
            adam.lr = lr
            adam.step(g)
        log.append(epoch, loss, lr, int((time.perf_counter() - t0) * 1000))
        if progress is not None:
            progress(epoch, loss)
        if checkpoint_every and checkpoint_path and (epoch + 1) % checkpoint_every == 0:
            save_agent(checkpoint_path, agent, cfg, adams)
    agent.eval()
    return agent, log


class DtsocPolicy:
    """Eval-mode lookup of the network for ``state.step_index``."""

    needs_latent_vol = False

    def __init__(self, agent: DtsocAgent):
        self.nets = [n.copy().eval() for n in agent.nets]
        self.shared = agent.shared
        self.n_steps = agent.n_steps
        self.contract = agent.contract
        self.scaling = agent.scaling

    def __call__(self, state: HedgeState):
        i = state.step_index
        if not 0 <= i < self.n_steps:
            raise LedgerError(f"step {i} outside [0, {self.n_steps - 1}]")
        net = self.nets[0] if self.shared else self.nets[i]
        out = net(features(state, self.contract, self.scaling)).reshape(-1)
        return out if np.ndim(state.spot_discounted) else float(out[0])


def as_policy(agent: DtsocAgent) -> DtsocPolicy:
    return DtsocPolicy(agent)


def save_agent(path, agent: DtsocAgent, cfg: DtsocConfig | None = None, adams=None) -> None:
    adams = adams or [None] * len(agent.nets)
    payload = {
        "contract": asdict(agent.contract),
        "scaling": {"shift": list(agent.scaling.shift), "scale": list(agent.scaling.scale)},
        "n_steps": agent.n_steps,
        "maturity": agent.maturity,
        "ir": agent.ir,
        "shared": agent.shared,
        "config": asdict(cfg) if cfg is not None else None,
        "nets": [net_to_dict(n, a) for n, a in zip(agent.nets, adams)],
    }
    save_checkpoint(path, json.loads(json.dumps(payload)), kind="dtsoc")


def load_agent(path) -> DtsocAgent:
    doc = load_checkpoint(path, kind="dtsoc")
    nets = [net_from_dict(d)[0].eval() for d in doc["nets"]]
    return DtsocAgent(
        nets=nets,
        contract=ContractSpec(**doc["contract"]),
        scaling=FeatureScaling(tuple(doc["scaling"]["shift"]), tuple(doc["scaling"]["scale"])),
        n_steps=doc["n_steps"],
        maturity=doc["maturity"],
        ir=doc["ir"],
        shared=doc["shared"],
    )
