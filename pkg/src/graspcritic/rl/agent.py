"""Gaussian actor and two-headed (dense, sparse) critic sharing one observation normalizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import Mlp

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = float(np.log(2 * np.pi))


class RunningNorm:
    """Running mean / variance of observations (parallel-merge update, float64)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(axis=0), x.var(axis=0)
        delta = bm - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + bv * n + delta**2 * self.count * n / tot) / tot
        self.count = tot

    def __call__(self, x: np.ndarray, dtype=np.float32) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -10.0, 10.0).astype(dtype)


@dataclass
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray


@dataclass
class CriticOutput:
    v_d: np.ndarray
    v_s: np.ndarray


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    z = (action - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


class ActorCritic:
    def __init__(self, obs_dim: int, act_dim: int, actor_hidden=(256, 256), critic_hidden=(256, 256),
                 dtype=np.float32):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.dtype = np.dtype(dtype)
        self.params: dict = {}
        self.actor = Mlp("actor", (obs_dim, *actor_hidden, act_dim), self.params)
        self.critic = Mlp("critic", (obs_dim, *critic_hidden, 2), self.params)
        self.norm = RunningNorm(obs_dim)

    def init(self, rng: np.random.Generator, init_log_std: float = -0.5, action_bias=None,
             zero_critic_head: bool = False) -> "ActorCritic":
        self.actor.init(rng, out_gain=0.01, dtype=self.dtype, out_bias=action_bias)
        self.critic.init(rng, out_gain=1.0, dtype=self.dtype)
        if zero_critic_head:
            last = self.critic.n_layers - 1
            self.params[self.critic.key(last, "weight")][:] = 0
            self.params[self.critic.key(last, "bias")][:] = 0
        self.params["log_std"] = np.full(self.act_dim, init_log_std, dtype=self.dtype)
        return self

    def astype(self, dtype) -> "ActorCritic":
        other = ActorCritic(self.obs_dim, self.act_dim, self.actor.sizes[1:-1], self.critic.sizes[1:-1], dtype)
        other.params.update({k: v.astype(dtype) for k, v in self.params.items()})
        other.norm.mean, other.norm.var, other.norm.count = self.norm.mean.copy(), self.norm.var.copy(), self.norm.count
        return other

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return self.norm(obs, self.dtype)

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def policy(self, x: np.ndarray, rng: np.random.Generator | None = None) -> PolicyOutput:
        """Policy on normalized observations; ``rng=None`` returns the mean action."""
        mean = self.actor.forward(x)
        log_std = self.log_std
        if rng is None:
            action = mean.astype(np.float64)
        else:
            action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return PolicyOutput(mean, log_std, action, gaussian_log_prob(action, mean, log_std))

    def values(self, x: np.ndarray) -> np.ndarray:
        """(N, 2) critic values on normalized observations: column 0 dense, column 1 sparse."""
        return self.critic.forward(x)

    def critic_eval(self, obs: np.ndarray) -> CriticOutput:
        """Critic on raw observation vectors, shape (N, obs_dim) or (obs_dim,)."""
        obs = np.asarray(obs)
        single = obs.ndim == 1
        obs2 = obs[None] if single else obs
        if obs2.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs2.shape[-1]} != {self.obs_dim}")
        v = self.values(self.normalize(obs2))
        if single:
            return CriticOutput(v[0, 0], v[0, 1])
        return CriticOutput(v[:, 0], v[:, 1])
