"""Actor-critic training on the planar hand environment."""
from __future__ import annotations

import csv
import dataclasses
import logging
import pickle
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..env import EnvConfig, PlanarHandEnv
from ..geometry import ObjectShape
from ..graspgen import EmptyCandidateSetError, Grasp, filter_stable, sample_candidates
from .agent import ActorCritic
from .checkpoint import config_hash, save_checkpoint
from .mlp import Adam
from .ppo import PPOConfig, RolloutBatch, combined_advantages, ppo_update

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "env_steps", "episodes", "goals", "success_rate", "drop_rate", "timeout_rate",
               "return_dense", "return_sparse", "v_s_mean", "pg_loss", "v_loss", "entropy", "kl", "clip_frac",
               "grad_norm", "log_std_mean")


@dataclass
class TrainConfig:
    total_steps: int = 2_000_000
    n_envs: int = 64
    rollout_len: int = 256
    seed: int = 0
    grasp_seed: int = 1
    grasp_angles: int = 64
    grasps_per_angle: int = 16
    actor_hidden: tuple = (256, 256)
    critic_hidden: tuple = (256, 256)
    init_log_std: float = -0.5
    attach_bias: float = 1.0
    checkpoint_every: int = 0
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        ppo = PPOConfig(**d.pop("ppo", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        for k in ("actor_hidden", "critic_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(ppo=ppo, **d)


def training_candidates(shapes: Sequence[ObjectShape], config: EnvConfig, n_angles: int, per_angle: int,
                        seed: int) -> list[Grasp]:
    """Stable grasps at ``n_angles`` random object angles per shape."""
    out: list[Grasp] = []
    for si, shape in enumerate(shapes):
        rng = np.random.default_rng([seed, si])
        for j in range(n_angles):
            phi = float(rng.uniform(-np.pi, np.pi))
            cands = sample_candidates(shape, phi, per_angle, int(rng.integers(2**31)), config, id_offset=len(out))
            try:
                stable = filter_stable(cands)
            except EmptyCandidateSetError:
                continue
            out.extend(dataclasses.replace(g, id=len(out) + i) for i, g in enumerate(stable))
    if not out:
        raise EmptyCandidateSetError("no stable training grasps")
    return out


class Trainer:
    def __init__(self, env_config: EnvConfig, shapes: Sequence[ObjectShape], cfg: TrainConfig):
        self.cfg = cfg
        self.env = PlanarHandEnv(env_config, shapes)
        self.env_config = self.env.config
        self.shapes = list(shapes)
        self.candidates = training_candidates(self.shapes, self.env_config, cfg.grasp_angles,
                                              cfg.grasps_per_angle, cfg.grasp_seed)
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, act_ss, mb_ss = ss.spawn(3)
        n = self.env_config.n_fingers
        bias = np.concatenate([np.zeros(n), np.full(n, cfg.attach_bias)])
        self.agent = ActorCritic(self.env_config.obs_dim, self.env_config.action_dim,
                                 cfg.actor_hidden, cfg.critic_hidden).init(
            np.random.default_rng(init_ss), cfg.init_log_std, action_bias=bias)
        self.opt = Adam(cfg.ppo.lr)
        self.act_rng = np.random.default_rng(act_ss)
        self.mb_rng = np.random.default_rng(mb_ss)
        self.episode_counter = 0
        self.env_steps = 0
        self.iteration = 0
        self.log_rows: list[dict] = []
        self.state = self._new_episodes(self.cfg.n_envs)
        self.ret_d = np.zeros(cfg.n_envs)
        self.ret_s = np.zeros(cfg.n_envs)

    # -- provenance -------------------------------------------------------
    def meta(self) -> dict:
        return {"env": self.env_config.to_dict(), "shapes": [s.to_dict() for s in self.shapes],
                "train": self.cfg.to_dict()}

    def config_hash(self) -> str:
        return config_hash(self.meta())

    # -- rollouts ---------------------------------------------------------
    def _new_episodes(self, k: int):
        grasps, goals, seeds = [], np.empty(k), []
        for i in range(k):
            c = self.episode_counter
            rng = np.random.default_rng([self.cfg.seed, 11, c])
            grasps.append(self.candidates[int(rng.integers(len(self.candidates)))])
            goals[i] = rng.uniform(-np.pi, np.pi)
            seeds.append([self.cfg.seed, 13, c])
            self.episode_counter += 1
        return self.env.reset_batch(grasps, goals, seeds)

    def collect(self):
        t_len, b = self.cfg.rollout_len, self.cfg.n_envs
        agent, env = self.agent, self.env
        obs_dim, act_dim = self.env_config.obs_dim, self.env_config.action_dim
        raw = np.empty((t_len, b, obs_dim))
        obs_n = np.empty((t_len, b, obs_dim), dtype=agent.dtype)
        actions = np.empty((t_len, b, act_dim))
        logps = np.empty((t_len, b))
        rd = np.empty((t_len, b))
        rs = np.empty((t_len, b))
        vals = np.empty((t_len, b, 2))
        terms = np.empty((t_len, b), dtype=bool)
        counts = {"episodes": 0, "success": 0, "drop": 0, "timeout": 0}
        finished_d, finished_s = [], []
        obs = env.observe(self.state).vector()
        for t in range(t_len):
            x = agent.normalize(obs)
            po = agent.policy(x, self.act_rng)
            v = agent.values(x)
            res = env.step(self.state, po.action)
            raw[t], obs_n[t], actions[t], logps[t], vals[t] = obs, x, po.action, po.log_prob, v
            rd[t], rs[t], terms[t] = res.r_dense, res.r_sparse, res.done
            self.ret_d += res.r_dense
            self.ret_s += res.r_sparse
            counts["success"] += int(res.success.sum())
            counts["drop"] += int(res.dropped.sum())
            counts["timeout"] += int(res.timeout.sum())
            self.state = res.next_state
            obs = res.obs.vector()
            done = np.flatnonzero(res.done)
            if len(done):
                counts["episodes"] += len(done)
                finished_d.extend(self.ret_d[done])
                finished_s.extend(self.ret_s[done])
                self.ret_d[done] = 0
                self.ret_s[done] = 0
                fresh = self._new_episodes(len(done))
                self.state.replace_rows(done, fresh)
                obs[done] = env.observe(fresh).vector()
        last = agent.values(agent.normalize(obs))
        self.env_steps += t_len * b
        agent.norm.update(raw.reshape(-1, obs_dim))
        batch = RolloutBatch(obs_n, actions, logps, rd, rs, vals, terms, last)
        counts["return_dense"] = float(np.mean(finished_d)) if finished_d else float("nan")
        counts["return_sparse"] = float(np.mean(finished_s)) if finished_s else float("nan")
        return batch, counts

    def train_iteration(self) -> dict:
        batch, counts = self.collect()
        adv, ret = combined_advantages(batch, self.cfg.ppo)
        n = adv.size
        stats = ppo_update(self.agent, self.opt, batch.obs.reshape(n, -1), batch.actions.reshape(n, -1),
                           batch.log_probs.reshape(n), adv.reshape(n), ret.reshape(n, 2), self.cfg.ppo,
                           self.mb_rng)
        self.iteration += 1
        goals = counts["success"] + counts["drop"] + counts["timeout"]
        row = {"iteration": self.iteration, "env_steps": self.env_steps, "episodes": counts["episodes"],
               "goals": goals,
               "success_rate": counts["success"] / goals if goals else float("nan"),
               "drop_rate": counts["drop"] / goals if goals else float("nan"),
               "timeout_rate": counts["timeout"] / goals if goals else float("nan"),
               "return_dense": counts["return_dense"], "return_sparse": counts["return_sparse"],
               "v_s_mean": float(batch.values[..., 1].mean()),
               "log_std_mean": float(np.mean(self.agent.log_std))}
        row.update({k: stats[k] for k in ("pg_loss", "v_loss", "entropy", "kl", "clip_frac", "grad_norm")})
        self.log_rows.append(row)
        log.info("iter %d steps %d success %.3f drop %.3f", self.iteration, self.env_steps,
                 row["success_rate"], row["drop_rate"])
        return row

    def train(self, total_steps: int | None = None, checkpoint_path=None, on_iteration=None) -> None:
        total = self.cfg.total_steps if total_steps is None else total_steps
        per_iter = self.cfg.rollout_len * self.cfg.n_envs
        while self.env_steps + per_iter <= total:
            row = self.train_iteration()
            if on_iteration is not None:
                on_iteration(row)
            every = self.cfg.checkpoint_every
            if checkpoint_path is not None and every and self.iteration % every == 0:
                self.save_checkpoint(checkpoint_path)

    # -- persistence ------------------------------------------------------
    def save_checkpoint(self, path) -> None:
        meta = self.meta()
        meta["progress"] = {"env_steps": self.env_steps, "iteration": self.iteration}
        save_checkpoint(path, self.agent, meta, self.config_hash())

    def write_log(self, path) -> None:
        write_log_csv(path, self.log_rows, self.config_hash())

    def save_state(self, path) -> None:
        """Everything needed to continue training bit-for-bit."""
        with open(path, "wb") as fh:
            pickle.dump(self.__dict__, fh)

    @classmethod
    def load_state(cls, path) -> "Trainer":
        obj = cls.__new__(cls)
        with open(path, "rb") as fh:
            obj.__dict__.update(pickle.load(fh))
        return obj


def write_log_csv(path, rows, cfg_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
