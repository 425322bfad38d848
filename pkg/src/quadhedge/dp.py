"""Exact first- and second-moment values on small finite-horizon MDPs.

Used to validate the bootstrapped targets of the RL-QH critics. A toy MDP has
``n_states`` states, ``n_actions`` actions and a fixed horizon; transitions
``P[s, a, s']`` and rewards ``R[s, a, s']`` are time-homogeneous and the
episode stops after ``horizon`` steps.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass
class ToyMdp:
    P: np.ndarray  # (S, A, S), rows sum to 1
    R: np.ndarray  # (S, A, S)
    horizon: int
    gamma: float = 1.0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.P.ndim != 3 or self.P.shape != self.R.shape or self.P.shape[0] != self.P.shape[2]:
            raise ValueError("P and R must both have shape (S, A, S)")
        if not np.allclose(self.P.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def random_mdp(n_states=4, n_actions=2, horizon=3, gamma=1.0, seed=0) -> ToyMdp:
    rng = np.random.default_rng(seed)
    P = rng.random((n_states, n_actions, n_states)) + 0.05
    P /= P.sum(axis=2, keepdims=True)
    R = rng.normal(size=(n_states, n_actions, n_states))
    return ToyMdp(P, R, horizon, gamma)


def random_policy(mdp: ToyMdp, seed=0, deterministic=False) -> np.ndarray:
    """Policy table ``pi[t, s, a]`` of action probabilities."""
    rng = np.random.default_rng(seed)
    shape = (mdp.horizon, mdp.n_states, mdp.n_actions)
    if deterministic:
        pi = np.zeros(shape)
        choice = rng.integers(mdp.n_actions, size=shape[:2])
        np.put_along_axis(pi, choice[..., None], 1.0, axis=2)
        return pi
    pi = rng.random(shape) + 0.05
    return pi / pi.sum(axis=2, keepdims=True)


@dataclass
class MomentTables:
    V: np.ndarray  # (H+1, S)
    M: np.ndarray  # (H+1, S)
    Q: np.ndarray  # (H, S, A)
    K: np.ndarray  # (H, S, A)


def dp_oracle(mdp: ToyMdp, pi: np.ndarray) -> MomentTables:
    """Backward induction for the mean and second moment of the return.

    With ``G_t = R_{t+1} + gamma G_{t+1}``:
    ``Q = E[R + gamma V']`` and ``K = E[R^2 + 2 gamma R V' + gamma^2 M']``.
    """
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    g = mdp.gamma
    V = np.zeros((H + 1, S))
    M = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    K = np.zeros((H, S, A))
    for t in range(H - 1, -1, -1):
        v1 = V[t + 1][None, None, :]
        m1 = M[t + 1][None, None, :]
        Q[t] = (mdp.P * (mdp.R + g * v1)).sum(axis=2)
        K[t] = (mdp.P * (mdp.R**2 + 2 * g * mdp.R * v1 + g * g * m1)).sum(axis=2)
        V[t] = (pi[t] * Q[t]).sum(axis=1)
        M[t] = (pi[t] * K[t]).sum(axis=1)
    return MomentTables(V, M, Q, K)


def enumerate_moments(mdp: ToyMdp, pi: np.ndarray, s0: int, t0: int = 0) -> tuple[float, float]:
    """``(E[G], E[G^2])`` from ``(t0, s0)`` by summing over every trajectory."""
    S, A = mdp.n_states, mdp.n_actions
    steps = mdp.horizon - t0
    mean = second = 0.0
    for seq in itertools.product(range(A), range(S), repeat=steps):
        prob, ret, disc, s = 1.0, 0.0, 1.0, s0
        for k in range(steps):
            a, s_next = seq[2 * k], seq[2 * k + 1]
            prob *= pi[t0 + k, s, a] * mdp.P[s, a, s_next]
            ret += disc * mdp.R[s, a, s_next]
            disc *= mdp.gamma
            s = s_next
        mean += prob * ret
        second += prob * ret * ret
    return mean, second


def sample_transitions(mdp: ToyMdp, pi: np.ndarray, n: int, seed=0):
    """Uniform (t, s) starts, actions from ``pi``; returns arrays for replay."""
    rng = np.random.default_rng(seed)
    t = rng.integers(mdp.horizon, size=n)
    s = rng.integers(mdp.n_states, size=n)
    a = np.array([rng.choice(mdp.n_actions, p=pi[ti, si]) for ti, si in zip(t, s)])
    s_next = np.array([rng.choice(mdp.n_states, p=mdp.P[si, ai]) for si, ai in zip(s, a)])
    r = mdp.R[s, a, s_next]
    done = t == mdp.horizon - 1
    return t, s, a, r, s_next, done
