"""Glue between configuration, trainers, checkpoints and evaluation."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from . import dtsoc, rlqh
from .analytic import bartlett_policy, delta_policy
from .config import ExperimentConfig, checkpoint_path
from .evaluation import MissingCheckpointError


def train_agent(cfg: ExperimentConfig, kind: str, market=None, cost=None, progress=None):
    """Train a learned agent; returns ``(agent, log)``."""
    market = market or cfg.market
    cost = cost or cfg.cost
    if kind == "dtsoc":
        return dtsoc.train(cfg.train.dtsoc, market, cfg.contract, cost, progress=progress)
    if kind == "rlqh":
        return rlqh.train(cfg.train.rlqh, market, cfg.contract, cost, progress=progress)
    raise ValueError(f"{kind!r} is not a trainable agent")


def save_agent(kind: str, path, agent, cfg: ExperimentConfig | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if kind == "dtsoc":
        dtsoc.save_agent(path, agent, cfg.train.dtsoc if cfg is not None else None)
    else:
        rlqh.save_agent(path, agent)


def load_agent(kind: str, path):
    return dtsoc.load_agent(path) if kind == "dtsoc" else rlqh.load_agent(path)


def agent_policy(kind: str, agent):
    return dtsoc.as_policy(agent) if kind == "dtsoc" else rlqh.as_policy(agent)


def train_or_load(cfg: ExperimentConfig, kind: str, market=None, cost=None,
                  train_missing: bool = True, progress=None):
    """Agent for a cell, read from the checkpoint store or trained and stored there."""
    path = checkpoint_path(cfg, kind, market, cost)
    if path.exists():
        return load_agent(kind, path)
    if not train_missing:
        return None
    agent, _ = train_agent(cfg, kind, market, cost, progress=progress)
    save_agent(kind, path, agent, cfg)
    return agent


def make_policy(cfg: ExperimentConfig, kind: str, market=None, cost=None,
                checkpoint=None, train_missing: bool = False):
    """Policy of ``kind`` for a market/cost cell; ``None`` if a checkpoint is missing."""
    market = market or cfg.market
    cost = cost or cfg.cost
    if kind == "delta":
        return delta_policy(cfg.contract, market.sigma0, market)
    if kind == "bartlett":
        return bartlett_policy(cfg.contract, market)
    if kind in ("dtsoc", "rlqh"):
        if checkpoint is not None:
            if not Path(checkpoint).exists():
                return None
            return agent_policy(kind, load_agent(kind, checkpoint))
        agent = train_or_load(cfg, kind, market, cost, train_missing)
        return None if agent is None else agent_policy(kind, agent)
    raise ValueError(f"no policy for agent kind {kind!r}")


def require_policy(cfg: ExperimentConfig, kind: str, market=None, cost=None, checkpoint=None,
                   train_missing: bool = False):
    pol = make_policy(cfg, kind, market, cost, checkpoint, train_missing)
    if pol is None:
        expected = checkpoint or checkpoint_path(cfg, kind, market, cost)
        raise MissingCheckpointError([f"{kind} (expected {expected})"])
    return pol


def bs_twin(market, bs_sigma=None):
    """Black-Scholes market with the SABR market's grid and initial volatility."""
    sigma = market.sigma0 if bs_sigma is None else bs_sigma
    return dataclasses.replace(market, model_kind="BS", sigma0=sigma)
