"""A repeated-attempt MDP whose sparse value has a closed form.

Each attempt takes ``tau`` steps. On the last step of an attempt it succeeds
with probability ``p`` (sparse reward 1, next attempt starts) or fails
(episode terminates, reward 0). The observation is the one-hot phase within
the attempt. The reward of the first success is discounted by gamma^(tau-1)
and every later attempt adds a factor gamma^tau p, so the value at phase 0 is

    V0 = gamma^(tau-1) p / (1 - gamma^tau p)
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .agent import ActorCritic
from .mlp import Adam
from .ppo import PPOConfig, RolloutBatch, combined_advantages, ppo_update


def closed_form_value(p: float, tau: int, gamma: float) -> float:
    """Discounted count of successes from phase 0; reward on step ``tau`` of each attempt."""
    q = gamma ** (tau - 1)   # discount from phase 0 to the rewarded step
    c = gamma ** tau * p     # discount-weighted continuation factor per attempt
    return q * p / (1 - c)


@dataclass
class GeometricSuccessMDP:
    p: float
    tau: int = 5

    def obs(self, phase: np.ndarray) -> np.ndarray:
        return np.eye(self.tau)[phase]

    def step(self, phase: np.ndarray, rng: np.random.Generator):
        """Returns (next_phase, sparse_reward, terminal); terminal rows restart at phase 0."""
        last = phase == self.tau - 1
        win = rng.random(phase.shape) < self.p
        reward = (last & win).astype(float)
        terminal = last & ~win
        return np.where(last, 0, phase + 1), reward, terminal


def train_toy_critic(p: float, tau: int = 5, gamma: float = 0.9, iterations: int = 200, n_envs: int = 128,
                     rollout_len: int = 64, seed: int = 0, lr: float = 1e-3) -> float:
    """Train a small actor-critic with the regular PPO update; return v_s at phase 0."""
    mdp = GeometricSuccessMDP(p, tau)
    rng = np.random.default_rng(seed)
    agent = ActorCritic(tau, 1, (32,), (32,)).init(rng)
    cfg = replace(PPOConfig(), gamma=gamma, lr=lr, minibatch=512)
    opt = Adam(lr)
    phase = np.zeros(n_envs, dtype=int)
    # the phase one-hot is already well scaled; keep normalization at identity
    agent.norm.count = 1.0
    for it in range(iterations):
        opt.lr = lr * (1 - it / iterations)  # anneal so the final estimate averages out return noise
        obs = np.empty((rollout_len, n_envs, tau), dtype=agent.dtype)
        acts = np.empty((rollout_len, n_envs, 1))
        logp = np.empty((rollout_len, n_envs))
        rs = np.empty((rollout_len, n_envs))
        vals = np.empty((rollout_len, n_envs, 2))
        terms = np.empty((rollout_len, n_envs), dtype=bool)
        for t in range(rollout_len):
            x = agent.normalize(mdp.obs(phase))
            po = agent.policy(x, rng)
            obs[t], acts[t], logp[t], vals[t] = x, po.action, po.log_prob, agent.values(x)
            phase, rs[t], terms[t] = mdp.step(phase, rng)
        last = agent.values(agent.normalize(mdp.obs(phase)))
        batch = RolloutBatch(obs, acts, logp, np.zeros_like(rs), rs, vals, terms, last)
        adv, ret = combined_advantages(batch, cfg)
        n = adv.size
        ppo_update(agent, opt, obs.reshape(n, -1), acts.reshape(n, -1), logp.reshape(n), adv.reshape(n),
                   ret.reshape(n, 2), cfg, rng)
    return float(agent.critic_eval(mdp.obs(np.array(0))).v_s)
