"""Critic-based grasp scoring and the candidate selection strategies."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import EnvConfig, Observation, PlanarHandEnv
from .geometry import ObjectShape, wrap_angle
from .graspgen import EmptyCandidateSetError, Grasp, enumerate_base_rotations
from .rl.agent import ActorCritic

SCORED_COLUMNS = ("grasp_id", "base_angle", "epsilon", "v_d", "v_s")


class Strategy(enum.Enum):
    ALL = "all"
    MOST_ROBUST = "most_robust"
    HIGHEST_SCORING = "highest_scoring"
    HIGHEST_SCORING_MOVE_BASE = "highest_scoring_move_base"
    LOWEST_SCORING = "lowest_scoring"

    @property
    def moves_base(self) -> bool:
        return self is Strategy.HIGHEST_SCORING_MOVE_BASE

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        key = text.strip().lower().replace("-", "_")
        for s in cls:
            if s.value == key or s.name.lower() == key:
                return s
        raise ValueError(f"unknown strategy {text!r}; choose from {[s.value for s in cls]}")


@dataclass(frozen=True)
class ScoredCandidate:
    grasp_id: int
    base_angle: float
    v_s: float
    v_d: float
    epsilon: float


def initial_observations(env: PlanarHandEnv, grasps: Sequence[Grasp], base_angles, goal_angle) -> np.ndarray:
    """Raw t = 0 observation vectors for (grasp, base) pairs, shape (N, obs_dim).

    The finger window and shape encoding do not depend on the hand-base
    rotation, so they are computed once per distinct grasp; only the goal
    direction changes with the base.
    """
    base = np.asarray(base_angles, dtype=np.float64).reshape(-1)
    if len(grasps) != len(base):
        raise ValueError("grasps and base_angles differ in length")
    keys = [id(g) for g in grasps]
    first: dict = {}
    for i, k in enumerate(keys):
        first.setdefault(k, len(first))
    unique = [None] * len(first)
    for g, k in zip(grasps, keys):
        unique[first[k]] = g
    rows = np.array([first[k] for k in keys], dtype=np.intp)
    state = env.initial_state(unique, np.zeros(len(unique)))
    obs = env.observe(state)
    goal = np.broadcast_to(np.asarray(goal_angle, dtype=np.float64), base.shape)
    delta = wrap_angle(wrap_angle(goal - base) - state.object_angle[rows])
    return np.concatenate([obs.window[rows], np.stack([np.cos(delta), np.sin(delta)], axis=1),
                           obs.shape_enc[rows]], axis=1)


def build_initial_obs(grasp: Grasp, goal_angle: float, shape: ObjectShape, config: EnvConfig) -> Observation:
    """The observation the critic sees right after reset, in the grasp's base-rotated hand frame."""
    if grasp.shape != shape.name:
        raise ValueError(f"grasp is on {grasp.shape!r}, not {shape.name!r}")
    env = PlanarHandEnv(config, [shape])
    vec = initial_observations(env, [grasp], [grasp.base_angle], goal_angle)[0]
    w = config.window_len * 2 * config.n_fingers
    return Observation(vec[None, :w], vec[None, w:w + 2], vec[None, w + 2:])


def score_candidates(agent: ActorCritic, env: PlanarHandEnv, candidates: Sequence[tuple[Grasp, float]],
                     goal_angle: float) -> list[ScoredCandidate]:
    """One batched critic pass over (grasp, base_angle) candidates, order preserved."""
    if len(candidates) == 0:
        raise EmptyCandidateSetError("no candidates to score")
    grasps = [g for g, _ in candidates]
    obs = initial_observations(env, grasps, [b for _, b in candidates], goal_angle)
    v = agent.critic_eval(obs)
    return [ScoredCandidate(g.id, float(b), float(vs), float(vd), float(g.epsilon))
            for (g, b), vs, vd in zip(candidates, v.v_s, v.v_d)]


def candidate_pairs(grasps: Sequence[Grasp], base_angles=(0.0,)) -> list[tuple[Grasp, float]]:
    return [(g, float(b)) for g in grasps for b in base_angles]


def default_base_grid() -> list[float]:
    return enumerate_base_rotations()


def _tiebreak(c: ScoredCandidate):
    return (c.grasp_id, abs(c.base_angle))


def select(strategy: Strategy, scored: Sequence[ScoredCandidate], rng: np.random.Generator | None = None
           ) -> ScoredCandidate:
    """Pick one candidate; ties go to the lowest grasp id, then the smallest base rotation."""
    if len(scored) == 0:
        raise EmptyCandidateSetError("no candidates to select from")
    if strategy is Strategy.ALL:
        if rng is None:
            raise ValueError("strategy ALL needs a random generator")
        return scored[int(rng.integers(len(scored)))]
    if strategy is Strategy.MOST_ROBUST:
        return min(scored, key=lambda c: (-c.epsilon, *_tiebreak(c)))
    if strategy is Strategy.LOWEST_SCORING:
        return min(scored, key=lambda c: (c.v_s, *_tiebreak(c)))
    return min(scored, key=lambda c: (-c.v_s, *_tiebreak(c)))


def write_scored_csv(path, scored: Sequence[ScoredCandidate], cfg_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(SCORED_COLUMNS)
        for c in scored:
            w.writerow([c.grasp_id, repr(c.base_angle), repr(c.epsilon), repr(c.v_d), repr(c.v_s)])
