"""Generalized advantage estimation and clipped-surrogate policy optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agent import LOG_STD_MAX, LOG_STD_MIN, LOG_2PI, ActorCritic, gaussian_log_prob
from .mlp import Adam, clip_by_global_norm

log = logging.getLogger(__name__)

HEADS = {"dense": 0, "sparse": 1}


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 1024
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0


@dataclass
class RolloutBatch:
    """Time-major rollout arrays, shape (T, B, ...)."""

    obs: np.ndarray          # normalized observations
    actions: np.ndarray
    log_probs: np.ndarray
    r_dense: np.ndarray
    r_sparse: np.ndarray
    values: np.ndarray       # (T, B, 2)
    terminals: np.ndarray
    last_values: np.ndarray  # (B, 2) bootstrap for rows still running at the end
    meta: list = field(default_factory=list)

    def rewards(self, head: str) -> np.ndarray:
        return self.r_dense if head == "dense" else self.r_sparse


def gae(batch: RolloutBatch, gamma: float, lam: float, head: str):
    """Advantages and returns for one critic head; terminals bootstrap with 0."""
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ValueError("gamma and lam must lie in [0, 1]")
    k = HEADS[head]
    rewards = np.asarray(batch.rewards(head), dtype=np.float64)
    values = np.asarray(batch.values, dtype=np.float64)[..., k]
    last = np.asarray(batch.last_values, dtype=np.float64)[..., k]
    terminals = np.asarray(batch.terminals, dtype=bool)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(last)
    next_value = last
    for t in reversed(range(len(rewards))):
        live = ~terminals[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(a: np.ndarray) -> np.ndarray:
    return (a - a.mean()) / (a.std() + 1e-8)


def combined_advantages(batch: RolloutBatch, cfg: PPOConfig):
    """Per-head GAE, each normalized, summed; plus per-head returns (N, 2)."""
    a_d, ret_d = gae(batch, cfg.gamma, cfg.lam, "dense")
    a_s, ret_s = gae(batch, cfg.gamma, cfg.lam, "sparse")
    adv = normalize_advantages(a_d) + normalize_advantages(a_s)
    returns = np.stack([ret_d, ret_s], axis=-1)
    return adv, returns


def losses_and_grads(agent: ActorCritic, obs, actions, old_log_probs, advantages, returns, cfg: PPOConfig):
    """Scalar PPO loss (surrogate + value + entropy) and gradients for every parameter."""
    n = obs.shape[0]
    dt = agent.dtype
    mean, acts_a = agent.actor.forward(obs, cache=True)
    raw_log_std = agent.params["log_std"]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    z = (actions - mean) / std
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - old_log_probs)
    s1 = ratio * advantages
    s2 = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * advantages
    pg_loss = -np.mean(np.minimum(s1, s2))
    entropy = float(np.sum(log_std) + 0.5 * len(log_std) * (1 + LOG_2PI))

    values, acts_c = agent.critic.forward(obs, cache=True)
    err = values - returns
    v_loss = 0.5 * np.mean(np.sum(err * err, axis=1))
    loss = pg_loss + cfg.value_coef * v_loss - cfg.entropy_coef * entropy

    d_logp = -(advantages * ratio * (s1 <= s2)) / n
    g_mean = (d_logp[:, None] * z / std).astype(dt)
    grads = agent.actor.backward(acts_a, g_mean)
    g_ls = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0) - cfg.entropy_coef
    inside = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    grads["log_std"] = (g_ls * inside).astype(dt)
    grads.update(agent.critic.backward(acts_c, (cfg.value_coef * err / n).astype(dt)))

    approx_kl = float(np.mean((ratio - 1) - (logp - old_log_probs)))
    stats = {"loss": float(loss), "pg_loss": float(pg_loss), "v_loss": float(v_loss), "entropy": entropy,
             "kl": approx_kl, "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip))}
    return float(loss), grads, stats


def ppo_update(agent: ActorCritic, opt: Adam, obs, actions, old_log_probs, advantages, returns,
               cfg: PPOConfig, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch Adam steps on flattened rollout data.

    A non-finite loss restores the parameters held before the update and
    raises ``NonFiniteLossError``.
    """
    n = obs.shape[0]
    snapshot = {k: v.copy() for k, v in agent.params.items()}
    opt_snapshot = opt.state_dict()
    acc: dict = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            loss, grads, stats = losses_and_grads(agent, obs[idx], actions[idx], old_log_probs[idx],
                                                  advantages[idx], returns[idx], cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                agent.params.update(snapshot)
                opt.load_state_dict(opt_snapshot)
                raise NonFiniteLossError("non-finite PPO loss; update aborted")
            stats["grad_norm"] = clip_by_global_norm(grads, cfg.max_grad_norm)
            opt.step(agent.params, grads)
            for k, v in stats.items():
                acc[k] = acc.get(k, 0.0) + v
            count += 1
    return {k: v / max(count, 1) for k, v in acc.items()}
