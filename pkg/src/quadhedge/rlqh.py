"""DDPG variant for the second moment of the return.

Three online networks (actor, Q critic, K critic) with slow target copies.
Both critics regress on bootstrapped targets

    target_Q = r + gamma * Q'(s', mu'(s'))
    target_K = r^2 + gamma^2 * K'(s', mu'(s')) + 2 * gamma * r * Q'(s', mu'(s'))

and the actor *descends* the mean K of its own actions, which minimises the
expected squared terminal hedging error when rewards are the per-step cash
flows and gamma = 1.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .analytic import initial_cash
from .ledger import ContractSpec, CostSpec, FeatureScaling, HedgeState, features
from .market import MarketConfig, simulate_path, train_seeds
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
    soft_update,
)

TAU_CONVENTIONS = ("online_weight", "target_weight")
LOG_COLUMNS = ("episode", "mean_reward", "q_loss", "k_loss", "actor_obj", "noise_std", "wall_ms")


@dataclass
class RlqhConfig:
    """Training settings.

    ``tau`` is the weight given to the online parameters in each soft update
    under ``tau_convention="online_weight"``, and the weight kept on the
    target under ``"target_weight"``. Rewards are divided by
    ``reward_scale`` before reaching the critics; ``"auto"`` uses
    ``contracts * s0 * sigma0 * sqrt(T)``, a typical terminal P&L size.
    """

    episodes: int = 50_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    tau: float = 1e-5
    tau_convention: str = "online_weight"
    gamma: float = 1.0
    noise_start: float = 0.2
    noise_end: float = 0.02
    buffer_capacity: int = 100_000
    minibatch: int = 128
    actor_hidden: tuple = (32, 64)
    critic_hidden: tuple = (32, 64)
    critic_layer_norm: bool = True
    actor_layer_norm: bool = False
    y0: float | str = "premium"
    reward_scale: float | str = "auto"
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        from .market import ConfigError

        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if self.episodes < 1:
            raise ConfigError("episodes", "must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma", "must lie in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau", "must lie in [0, 1]")
        if self.tau_convention not in TAU_CONVENTIONS:
            raise ConfigError("tau_convention", f"must be one of {TAU_CONVENTIONS}")
        if self.minibatch < 1 or self.buffer_capacity < self.minibatch:
            raise ConfigError("minibatch", "need 1 <= minibatch <= buffer_capacity")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("lr", "learning rates must be > 0")
        if self.noise_start < 0 or self.noise_end < 0:
            raise ConfigError("noise", "noise std must be >= 0")
        if self.log_every < 1:
            raise ConfigError("log_every", "must be >= 1")
        if self.reward_scale != "auto" and not float(self.reward_scale) > 0:
            raise ConfigError("reward_scale", "must be > 0 or 'auto'")
        if self.y0 != "premium" and not math.isfinite(float(self.y0)):
            raise ConfigError("y0", "must be a number or 'premium'")

    @property
    def rho_smooth(self) -> float:
        """Weight kept on the old target parameters at each soft update."""
        return 1.0 - self.tau if self.tau_convention == "online_weight" else self.tau


# -- replay -------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO ring of (state, action, reward, next_state, terminal)."""

    def __init__(self, capacity: int, state_dim: int, seed=0):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        vals = (np.asarray(s, float), float(a), float(r), np.asarray(s2, float))
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise ValueError("non-finite transition")
        i = self.head
        self.s[i], self.a[i], self.r[i], self.s2[i] = vals
        self.done[i] = bool(done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int):
        if n > self.size:
            raise ValueError(f"cannot sample {n} from {self.size} transitions")
        idx = self.rng.choice(self.size, size=n, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def oldest(self):
        """Index of the oldest stored transition."""
        return self.head if self.size == self.capacity else 0


# -- target and update math ---------------------------------------------------

def compute_targets(r, done, q_next, k_next, gamma: float):
    """Bellman targets for Q and K; terminal transitions drop the bootstrap terms."""
    r = np.asarray(r, dtype=float)
    live = 1.0 - np.asarray(done, dtype=float)
    q_next = np.asarray(q_next, dtype=float) * live
    k_next = np.asarray(k_next, dtype=float) * live
    target_q = r + gamma * q_next
    target_k = r * r + gamma * gamma * k_next + 2.0 * gamma * r * q_next
    return target_q, target_k


def regression_step(net: Mlp, adam: Adam, x, y) -> float:
    """One ADAM step on ``mean((net(x) - y)^2)``; returns the pre-step loss."""
    tape = ad.Tape()
    out = net.forward(x, tape)
    with ad.recording(tape):
        loss = ad.mean(ad.square(ad.reshape(out, (-1,)) - np.asarray(y, dtype=float)))
    adam.step(net.gradients(tape.backward(loss)))
    return float(loss.value)


def mean_critic_of_actor(actor: Mlp, critic: Mlp, states, action_encoder, tape: ad.Tape):
    """Node holding ``mean_s critic(s, actor(s))`` with only the actor trainable."""
    a = actor.forward(states, tape)
    with ad.recording(tape):
        a_enc = action_encoder(a)
        x = ad.concat([tape.constant(states), a_enc], axis=-1)
    out = critic.forward(x, tape, trainable=False)
    with ad.recording(tape):
        return ad.mean(out)


def actor_step(actor: Mlp, adam: Adam, critic: Mlp, states, action_encoder) -> float:
    """Descend the mean critic value of the actor's own actions."""
    tape = ad.Tape()
    obj = mean_critic_of_actor(actor, critic, states, action_encoder, tape)
    adam.step(actor.gradients(tape.backward(obj)))
    return float(obj.value)


# -- agent --------------------------------------------------------------------

def _unit_action_encoder(a):
    """Map sigmoid output in (0, 1) to roughly [-1, 1] for the critic input."""
    return (a - 0.5) * 2.0


@dataclass
class RlqhAgent:
    actor: Mlp
    q: Mlp
    k: Mlp
    actor_targ: Mlp
    q_targ: Mlp
    k_targ: Mlp
    contract: ContractSpec
    scaling: FeatureScaling
    config: RlqhConfig = field(default_factory=RlqhConfig)

    @property
    def scale(self) -> float:
        """Shares per unit of actor output (negative for a long-call hedger)."""
        return self.contract.sign * self.contract.contracts

    def unit_action(self, x) -> np.ndarray:
        return self.actor(x).reshape(-1)

    def critic_input(self, x, unit_a) -> np.ndarray:
        return np.concatenate((x, _unit_action_encoder(np.asarray(unit_a)).reshape(-1, 1)), axis=1)


def build_agent(cfg: RlqhConfig, market: MarketConfig, contract: ContractSpec,
                scaling: FeatureScaling | None = None) -> RlqhAgent:
    scaling = scaling or FeatureScaling.default(market, contract)
    actor_spec = MlpSpec(3, cfg.actor_hidden, output_activation="sigmoid",
                         layer_norm=cfg.actor_layer_norm)
    critic_spec = MlpSpec(4, cfg.critic_hidden, layer_norm=cfg.critic_layer_norm)
    actor = Mlp(actor_spec, seed=[cfg.seed, 11])
    q = Mlp(critic_spec, seed=[cfg.seed, 12])
    k = Mlp(critic_spec, seed=[cfg.seed, 13])
    return RlqhAgent(actor, q, k, actor.copy(), q.copy(), k.copy(), contract, scaling, cfg)


class RlqhPolicy:
    """Deterministic eval-mode policy ``state -> sign * contracts * actor(features)``."""

    needs_latent_vol = False
    n_steps = None

    def __init__(self, agent: RlqhAgent):
        self.actor = agent.actor.copy().eval()
        self.contract = agent.contract
        self.scaling = agent.scaling
        self.scale = agent.scale

    def __call__(self, state: HedgeState):
        x = features(state, self.contract, self.scaling)
        out = self.scale * self.actor(x).reshape(-1)
        return out if np.ndim(state.spot_discounted) else float(out[0])


def as_policy(agent: RlqhAgent) -> RlqhPolicy:
    return RlqhPolicy(agent)


def update(agent: RlqhAgent, batch, opt) -> tuple[float, float, float]:
    """One gradient step on Q, K and the actor, then soft target updates."""
    cfg = agent.config
    s, a_unit, r, s2, done = batch
    a2 = agent.actor_targ(s2).reshape(-1)
    x2 = agent.critic_input(s2, a2)
    q_next = agent.q_targ(x2).reshape(-1)
    k_next = agent.k_targ(x2).reshape(-1)
    target_q, target_k = compute_targets(r, done, q_next, k_next, cfg.gamma)
    x = agent.critic_input(s, a_unit)
    q_loss = regression_step(agent.q, opt["q"], x, target_q)
    k_loss = regression_step(agent.k, opt["k"], x, target_k)
    actor_obj = actor_step(agent.actor, opt["actor"], agent.k, s, _unit_action_encoder)
    rho = cfg.rho_smooth
    soft_update(agent.actor_targ, agent.actor, rho)
    soft_update(agent.q_targ, agent.q, rho)
    soft_update(agent.k_targ, agent.k, rho)
    return q_loss, k_loss, actor_obj


def noise_schedule(cfg: RlqhConfig, episode: int) -> float:
    if cfg.episodes <= 1:
        return cfg.noise_end
    frac = episode / (cfg.episodes - 1)
    return cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac


def reward_scale(cfg: RlqhConfig, market: MarketConfig, contract: ContractSpec) -> float:
    """Currency unit the critics work in; ``"auto"`` is the terminal spot std of one contract."""
    if cfg.reward_scale == "auto":
        return contract.contracts * market.s0 * market.sigma0 * math.sqrt(market.maturity)
    return float(cfg.reward_scale)


def train(cfg: RlqhConfig, market: MarketConfig, contract: ContractSpec, cost: CostSpec,
          progress=None) -> tuple[RlqhAgent, TrainingLog]:
    """Run the full actor-critic loop; one update per environment step."""
    agent = build_agent(cfg, market, contract)
    opt = {
        "actor": Adam(agent.actor, cfg.actor_lr),
        "q": Adam(agent.q, cfg.critic_lr),
        "k": Adam(agent.k, cfg.critic_lr),
    }
    buffer = ReplayBuffer(cfg.buffer_capacity, 3, seed=[cfg.seed, 21])
    noise_rng = np.random.default_rng([cfg.seed, 22])
    log = TrainingLog(LOG_COLUMNS)
    monitor = DivergenceMonitor()
    shift = np.asarray(agent.scaling.shift)
    scale_f = np.asarray(agent.scaling.scale)
    n = market.steps
    maturity = market.maturity
    k_disc = contract.strike * math.exp(-market.ir * maturity)
    seeds = train_seeds(cfg.seed, 0, cfg.episodes)
    y0 = initial_cash(cfg.y0, market, contract)
    unit = reward_scale(cfg, market, contract)
    window = []
    t0 = time.perf_counter()

    def feat(spot, ttm, h_prev):
        raw = np.array([spot / contract.strike, ttm, h_prev / contract.contracts])
        return (raw - shift) / scale_f

    for ep in range(cfg.episodes):
        path = simulate_path(market, seeds[ep])
        sigma_n = noise_schedule(cfg, ep)
        h_prev = 0.0
        x = feat(path.spot[0], maturity, 0.0)
        rewards = np.empty(n)
        losses = []
        for i in range(n):
            u = float(agent.actor(x[None, :])[0, 0]) + sigma_n * noise_rng.standard_normal()
            u = min(max(u, 0.0), 1.0)
            h = agent.scale * u
            s_i, s_next = path.spot[i], path.spot[i + 1]
            r = h * (s_next - s_i) - cost.alpha * s_i * abs(h - h_prev)
            terminal = i == n - 1
            if terminal:
                liq = cost.alpha * s_next * abs(h) if cost.liquidate else 0.0
                r -= liq + contract.liability(s_next, k_disc)
            if i == 0:
                r += y0
            x2 = feat(s_next, maturity - path.times[i + 1], h)
            buffer.add(x, u, r / unit, x2, terminal)
            rewards[i] = r
            if len(buffer) >= cfg.minibatch:
                losses.append(update(agent, buffer.sample(cfg.minibatch), opt))
            x = x2
            h_prev = h
        window.append((rewards.mean(), *(np.mean(losses, axis=0) if losses else (np.nan,) * 3)))
        if (ep + 1) % cfg.log_every == 0 or ep == cfg.episodes - 1:
            w = np.array(window, dtype=float)
            means = [float(np.nanmean(w[:, j])) if np.any(np.isfinite(w[:, j])) else float("nan")
                     for j in range(4)]
            log.append(ep + 1, *means, sigma_n, int((time.perf_counter() - t0) * 1000))
            if math.isfinite(means[2]):
                monitor.update(means[2], "k_loss")
            window = []
            if progress is not None:
                progress(ep + 1, means)
    return agent, log


# -- persistence ---------------------------------------------------------------

def save_agent(path, agent: RlqhAgent) -> None:
    cfg = asdict(agent.config)
    payload = {
        "config": cfg,
        "contract": asdict(agent.contract),
        "scaling": {"shift": list(agent.scaling.shift), "scale": list(agent.scaling.scale)},
        "nets": {name: net_to_dict(getattr(agent, name))
                 for name in ("actor", "q", "k", "actor_targ", "q_targ", "k_targ")},
    }
    save_checkpoint(path, json.loads(json.dumps(payload)), kind="rlqh")


def load_agent(path) -> RlqhAgent:
    doc = load_checkpoint(path, kind="rlqh")
    nets = {name: net_from_dict(d)[0] for name, d in doc["nets"].items()}
    return RlqhAgent(
        contract=ContractSpec(**doc["contract"]),
        scaling=FeatureScaling(tuple(doc["scaling"]["shift"]), tuple(doc["scaling"]["scale"])),
        config=RlqhConfig(**doc["config"]),
        **nets,
    )
